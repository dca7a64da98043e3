//! Direct-loop convolution and transposed convolution over NCHW slices.

#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn conv_out(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn deconv_out(&self) -> (usize, usize) {
        ((self.h - 1) * self.stride + self.k - 2 * self.pad, (self.w - 1) * self.stride + self.k - 2 * self.pad)
    }
}

/// Cross-correlation; weight `[c_out, c_in, k, k]`.
pub fn conv2d(g: &Geometry, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = g.conv_out();
    let mut y = vec![0.0; g.n * g.c_out * ho * wo];
    for n in 0..g.n {
        for co in 0..g.c_out {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[co]);
                    for ci in 0..g.c_in {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((n * g.c_in + ci) * g.h + iy as usize) * g.w + ix as usize];
                                acc += xv * weight[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                    y[((n * g.c_out + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution as a scatter: every input pixel stamps its
/// weighted kernel onto the output. Weight `[c_in, c_out, k, k]`.
pub fn deconv2d(g: &Geometry, x: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let (ho, wo) = g.deconv_out();
    let mut y = vec![0.0; g.n * g.c_out * ho * wo];
    for n in 0..g.n {
        for co in 0..g.c_out {
            let b = bias.map_or(0.0, |b| b[co]);
            y[(n * g.c_out + co) * ho * wo..][..ho * wo].iter_mut().for_each(|v| *v = b);
        }
        for ci in 0..g.c_in {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let xv = x[((n * g.c_in + ci) * g.h + iy) * g.w + ix];
                    for co in 0..g.c_out {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let oy = (iy * g.stride + ky) as isize - g.pad as isize;
                                let ox = (ix * g.stride + kx) as isize - g.pad as isize;
                                if oy < 0 || ox < 0 || oy >= ho as isize || ox >= wo as isize {
                                    continue;
                                }
                                y[((n * g.c_out + co) * ho + oy as usize) * wo + ox as usize] +=
                                    xv * weight[((ci * g.c_out + co) * g.k + ky) * g.k + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}
