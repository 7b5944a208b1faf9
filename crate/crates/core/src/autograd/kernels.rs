//! Raw loops behind the graph ops. All buffers are row-major.

/// `a[m,k] · b[k,n]`
pub fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// `a[m,n] · b[k,n]ᵀ -> [m,k]`
pub fn mm_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for t in 0..k {
            let brow = &b[t * n..(t + 1) * n];
            c[i * k + t] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// `a[m,k]ᵀ · b[m,n] -> [k,n]`
pub fn mm_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    /// Output columns `ow` whose input column `ow*stride + kj - pad` is in range.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = if kj >= self.pad {
            0
        } else {
            (self.pad - kj).div_ceil(self.stride)
        };
        // largest ow with ow*stride + kj - pad <= w - 1
        let limit = self.w + self.pad;
        let hi = if limit <= kj {
            0
        } else {
            ((limit - kj - 1) / self.stride + 1).min(self.w_out)
        };
        (lo, hi.max(lo))
    }

    fn in_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let r = oh * self.stride + ki;
        if r < self.pad || r - self.pad >= self.h {
            None
        } else {
            Some(r - self.pad)
        }
    }
}

/// Patch matrix `[h_out·w_out, c_in·kh·kw]`; out-of-range taps are zero.
fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.c_in * g.kh * g.kw;
    let mut cols = vec![0.0; g.h_out * g.w_out * k];
    for ci in 0..g.c_in {
        let xplane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let col = (ci * g.kh + ki) * g.kw + kj;
                let (lo, hi) = g.col_range(kj);
                for oh in 0..g.h_out {
                    let Some(ih) = g.in_row(oh, ki) else { continue };
                    let xrow = &xplane[ih * g.w..(ih + 1) * g.w];
                    for ow in lo..hi {
                        cols[(oh * g.w_out + ow) * k + col] = xrow[ow * g.stride + kj - g.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Adds patch gradients `[h_out·w_out, c_in·kh·kw]` back onto the input layout.
fn col2im(cols: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.c_in * g.kh * g.kw;
    let mut dx = vec![0.0; g.c_in * g.h * g.w];
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let col = (ci * g.kh + ki) * g.kw + kj;
                let (lo, hi) = g.col_range(kj);
                for oh in 0..g.h_out {
                    let Some(ih) = g.in_row(oh, ki) else { continue };
                    let row = &mut plane[ih * g.w..(ih + 1) * g.w];
                    for ow in lo..hi {
                        row[ow * g.stride + kj - g.pad] += cols[(oh * g.w_out + ow) * k + col];
                    }
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let k = g.c_in * g.kh * g.kw;
    let positions = g.h_out * g.w_out;
    let cols = im2col(x, g);
    let mut out = mm_a_bt(w, &cols, g.c_out, k, positions);
    for (co, plane) in out.chunks_exact_mut(positions).enumerate() {
        plane.iter_mut().for_each(|v| *v += b[co]);
    }
    out
}

pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Option<Vec<f64>>,
    pub db: Vec<f64>,
}

pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    up: &[f64],
    g: &ConvGeometry,
    want_dx: bool,
    want_dw: bool,
) -> ConvGrads {
    let k = g.c_in * g.kh * g.kw;
    let positions = g.h_out * g.w_out;
    let db = up.chunks_exact(positions).map(|p| p.iter().sum()).collect();
    let dw = want_dw.then(|| mm(up, &im2col(x, g), g.c_out, positions, k));
    let dx = want_dx.then(|| col2im(&mm_at_b(up, w, g.c_out, positions, k), g));
    ConvGrads { dx, dw, db }
}
