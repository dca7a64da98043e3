import init, { render_face, attention_map, frechet_2d } from "./pkg/usegan_web.js";

const $ = (id) => document.getElementById(id);
let query = { x: 0, y: 0 };

function params() {
  return {
    seed: BigInt($("seed").value || 0),
    index: BigInt($("index").value || 0),
    side: Number($("side").value),
    heads: Number($("heads").value),
    gain: Number($("gain").value),
  };
}

function paint(canvas, side, rgba) {
  canvas.width = side;
  canvas.height = side;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), side, side), 0, 0);
}

function drawFace() {
  const p = params();
  query.x = Math.min(query.x, p.side - 1);
  query.y = Math.min(query.y, p.side - 1);
  const rgba = render_face(p.seed, p.index, p.side);
  const i = (query.y * p.side + query.x) * 4;
  rgba.set([255, 0, 255, 255], i);
  paint($("face"), p.side, rgba);
  drawAttention(p);
}

function drawAttention(p) {
  $("gain-out").value = p.gain;
  const row = attention_map(p.seed, p.index, p.side, p.heads, p.gain, query.x, query.y);
  const max = row.reduce((m, v) => Math.max(m, v), 0) || 1;
  const rgba = new Uint8Array(row.length * 4);
  row.forEach((v, j) => {
    const t = v / max;
    rgba.set([Math.round(255 * t), Math.round(255 * t * t), Math.round(80 * (1 - t)), 255], j * 4);
  });
  paint($("attn"), p.side, rgba);
}

const gaussianFields = ["mean x", "mean y", "var x", "var y", "corr"];
const defaults = { g1: [0, 0, 1, 1, 0], g2: [1.5, -0.5, 2, 0.5, 0.4] };

function gaussianInputs(id) {
  const box = $(id);
  return gaussianFields.map((name, k) => {
    const label = document.createElement("label");
    const input = document.createElement("input");
    input.type = "number";
    input.step = "0.1";
    input.value = defaults[id][k];
    if (name.startsWith("var")) input.min = "0";
    if (name === "corr") { input.min = "-0.99"; input.max = "0.99"; }
    input.addEventListener("input", updateFid);
    label.append(name + " ", input);
    box.append(document.createElement("br"), label);
    return input;
  });
}

let g1, g2;
function updateFid() {
  const a = g1.map((i) => Number(i.value));
  const b = g2.map((i) => Number(i.value));
  try {
    $("fid").value = frechet_2d(...a, ...b).toFixed(6);
  } catch (e) {
    $("fid").value = e.message;
  }
}

await init();
g1 = gaussianInputs("g1");
g2 = gaussianInputs("g2");
for (const id of ["seed", "index", "side", "heads", "gain"]) $(id).addEventListener("input", drawFace);
$("face").addEventListener("click", (ev) => {
  const side = params().side;
  const r = ev.target.getBoundingClientRect();
  query = {
    x: Math.floor(((ev.clientX - r.left) / r.width) * side),
    y: Math.floor(((ev.clientY - r.top) / r.height) * side),
  };
  drawFace();
});
drawFace();
updateFid();
