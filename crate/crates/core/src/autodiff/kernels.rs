//! Raw slice kernels shared by the forward and backward passes.

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut bt = vec![0.0; k * n];
    for j in 0..n {
        for (p, &v) in b[j * k..(j + 1) * k].iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    mm(a, &bt, m, k, n)
}

/// `out[m×n] = a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_at_b(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }
}

/// Unfold `input[C×H×W]` into `[C·p·p × H'·W']` columns (zero padding).
pub(crate) fn im2col(input: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.kernel;
    let pixels = g.out_pixels();
    let mut cols = vec![0.0; g.patch_len() * pixels];
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..p {
            for kj in 0..p {
                let row = (c * p + ki) * p + kj;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * g.out_width + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let p = g.kernel;
    let pixels = g.out_pixels();
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..p {
            for kj in 0..p {
                let row = (c * p + ki) * p + kj;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            plane[iy as usize * g.width + ix as usize] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Per-dimension strides of `operand` viewed inside `out` under trailing
/// alignment; broadcast dimensions get stride 0.
pub(crate) fn broadcast_strides(out: &[usize], operand: &[usize]) -> Vec<usize> {
    let offset = out.len() - operand.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..operand.len()).rev() {
        if operand[d] != 1 {
            strides[offset + d] = acc;
        }
        acc *= operand[d];
    }
    strides
}

/// Walks every element of `out`, yielding (out index, a index, b index).
pub(crate) fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out.iter().product();
    if a == out && b == out {
        for i in 0..numel {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(out, a);
    let sb = broadcast_strides(out, b);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Result shape when one operand broadcasts into the other, or `None`.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    fn fits(small: &[usize], big: &[usize]) -> bool {
        small.len() <= big.len()
            && small
                .iter()
                .rev()
                .zip(big.iter().rev())
                .all(|(&s, &g)| s == g || s == 1)
    }
    if fits(b, a) {
        Some(a.to_vec())
    } else if fits(a, b) {
        Some(b.to_vec())
    } else {
        None
    }
}
