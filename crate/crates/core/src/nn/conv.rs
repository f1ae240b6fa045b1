//! 3x3 convolution (padding 1, stride 1 or 2) via im2col + GEMM.

use super::{Float, PAR_CHUNK};
use ndarray::{concatenate, Array1, Array2, Array4, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

const K: usize = 3;
const PAD: isize = 1;

#[derive(Debug, Clone)]
pub struct Conv2d<F: Float> {
    pub w: Array4<F>, // (out, in, 3, 3)
    pub b: Array1<F>,
    pub gw: Array4<F>,
    pub gb: Array1<F>,
    pub stride: usize,
}

impl<F: Float> Conv2d<F> {
    /// He-normal initialisation.
    pub fn new(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self
    where
        StandardNormal: Distribution<F>,
    {
        let std = F::from_f64((2.0 / (cin * K * K) as f64).sqrt());
        let w = Array4::from_shape_simple_fn((cout, cin, K, K), || {
            let z: F = StandardNormal.sample(rng);
            z * std
        });
        Self {
            gw: Array4::zeros(w.dim()),
            w,
            b: Array1::zeros(cout),
            gb: Array1::zeros(cout),
            stride,
        }
    }

    /// All-zero weights; used for output layers that should start as identity
    /// contributors (predicted noise exactly zero at initialisation).
    pub fn new_zeroed(cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            w: Array4::zeros((cout, cin, K, K)),
            b: Array1::zeros(cout),
            gw: Array4::zeros((cout, cin, K, K)),
            gb: Array1::zeros(cout),
            stride,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 - K) / self.stride + 1, (w + 2 - K) / self.stride + 1)
    }

    fn w2d(&self) -> Array2<F> {
        let (cout, cin, _, _) = self.w.dim();
        self.w
            .view()
            .into_shape_with_order((cout, cin * K * K))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, _cin, h, w) = x.dim();
        let (cout, ..) = self.w.dim();
        let (ho, wo) = self.out_hw(h, w);
        let w2 = self.w2d();
        let x_std = x.as_standard_layout();
        let chunks: Vec<ArrayView4<F>> = x_std.axis_chunks_iter(Axis(0), PAR_CHUNK).collect();
        let outs: Vec<Array4<F>> = chunks
            .into_par_iter()
            .map(|xc| {
                let cols = im2col(&xc, self.stride);
                let y_rows = cols.dot(&w2.t()); // (bc*ho*wo, cout)
                rows_to_maps(&y_rows, &self.b, xc.dim().0, cout, ho, wo)
            })
            .collect();
        if outs.len() == 1 {
            outs.into_iter().next().unwrap()
        } else {
            let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
            concatenate(Axis(0), &views).unwrap()
        }
        .into_shape_with_order((b, cout, ho, wo))
        .unwrap()
    }

    /// Full backward pass: accumulates weight/bias gradients and returns the
    /// gradient w.r.t. the input.
    pub fn backward(&mut self, x: &Array4<F>, gy: &Array4<F>) -> Array4<F> {
        let (_b, cin, h, w) = x.dim();
        let (cout, ..) = self.w.dim();
        let (_, _, ho, wo) = gy.dim();
        let w2 = self.w2d();
        let x_std = x.as_standard_layout();
        let gy_std = gy.as_standard_layout();
        let xcs: Vec<ArrayView4<F>> = x_std.axis_chunks_iter(Axis(0), PAR_CHUNK).collect();
        let gycs: Vec<ArrayView4<F>> = gy_std.axis_chunks_iter(Axis(0), PAR_CHUNK).collect();
        let parts: Vec<(Array4<F>, Array2<F>, Array1<F>)> = xcs
            .into_par_iter()
            .zip(gycs)
            .map(|(xc, gyc)| {
                let bc = xc.dim().0;
                let cols = im2col(&xc, self.stride);
                let gy_rows = maps_to_rows(&gyc, bc, cout, ho, wo);
                let gw_part = gy_rows.t().dot(&cols); // (cout, cin*9)
                let gb_part = gy_rows.sum_axis(Axis(0));
                let gcols = gy_rows.dot(&w2); // (bc*ho*wo, cin*9)
                let gx = col2im(&gcols, bc, cin, h, w, self.stride);
                (gx, gw_part, gb_part)
            })
            .collect();
        // Reduce partial parameter gradients in chunk order (deterministic).
        let mut gw_flat = self
            .gw
            .view_mut()
            .into_shape_with_order((cout, cin * K * K))
            .unwrap();
        let mut gxs = Vec::with_capacity(parts.len());
        for (gx, gw_part, gb_part) in parts {
            gw_flat += &gw_part;
            self.gb += &gb_part;
            gxs.push(gx);
        }
        if gxs.len() == 1 {
            gxs.into_iter().next().unwrap()
        } else {
            let views: Vec<_> = gxs.iter().map(|g| g.view()).collect();
            concatenate(Axis(0), &views).unwrap()
        }
    }

    /// Input gradient only; leaves parameter gradients untouched so inference
    /// consumers (attacks) can share an immutable network.
    pub fn backward_input(&self, gy: &Array4<F>, in_hw: (usize, usize)) -> Array4<F> {
        let (cout, cin, _, _) = self.w.dim();
        let (h, w) = in_hw;
        let (_, _, ho, wo) = gy.dim();
        let w2 = self.w2d();
        let gy_std = gy.as_standard_layout();
        let gycs: Vec<ArrayView4<F>> = gy_std.axis_chunks_iter(Axis(0), PAR_CHUNK).collect();
        let gxs: Vec<Array4<F>> = gycs
            .into_par_iter()
            .map(|gyc| {
                let bc = gyc.dim().0;
                let gy_rows = maps_to_rows(&gyc, bc, cout, ho, wo);
                let gcols = gy_rows.dot(&w2);
                col2im(&gcols, bc, cin, h, w, self.stride)
            })
            .collect();
        if gxs.len() == 1 {
            gxs.into_iter().next().unwrap()
        } else {
            let views: Vec<_> = gxs.iter().map(|g| g.view()).collect();
            concatenate(Axis(0), &views).unwrap()
        }
    }

    pub fn visit_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(&str, &[usize], &mut [F], &mut [F]),
    ) {
        let wshape = self.w.shape().to_vec();
        f(
            &format!("{prefix}.w"),
            &wshape,
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        let bshape = self.b.shape().to_vec();
        f(
            &format!("{prefix}.b"),
            &bshape,
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[F])) {
        f(
            &format!("{prefix}.w"),
            self.w.shape(),
            self.w.as_slice().unwrap(),
        );
        f(
            &format!("{prefix}.b"),
            self.b.shape(),
            self.b.as_slice().unwrap(),
        );
    }
}

/// Unfold padded 3x3 patches: (bc, cin, h, w) -> (bc*ho*wo, cin*9).
fn im2col<F: Float>(x: &ArrayView4<F>, stride: usize) -> Array2<F> {
    let (bc, cin, h, w) = x.dim();
    let ho = (h + 2 - K) / stride + 1;
    let wo = (w + 2 - K) / stride + 1;
    let mut cols = Array2::<F>::zeros((bc * ho * wo, cin * K * K));
    let xs = x.to_slice().expect("chunk views are contiguous");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = cin * K * K;
    for b in 0..bc {
        for i in 0..ho {
            let yi = (i * stride) as isize - PAD;
            for j in 0..wo {
                let xj = (j * stride) as isize - PAD;
                let row = ((b * ho + i) * wo + j) * row_len;
                for ci in 0..cin {
                    let plane = (b * cin + ci) * h;
                    let cbase = row + ci * K * K;
                    for ki in 0..K {
                        let yy = yi + ki as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let xrow = (plane + yy as usize) * w;
                        let dst = cbase + ki * K;
                        for kj in 0..K {
                            let xx = xj + kj as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            cs[dst + kj] = xs[xrow + xx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add column gradients back onto the (padded) input grid.
fn col2im<F: Float>(
    gcols: &Array2<F>,
    bc: usize,
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
) -> Array4<F> {
    let ho = (h + 2 - K) / stride + 1;
    let wo = (w + 2 - K) / stride + 1;
    let mut gx = Array4::<F>::zeros((bc, cin, h, w));
    let gs = gcols.as_slice().unwrap();
    let xs = gx.as_slice_mut().unwrap();
    let row_len = cin * K * K;
    for b in 0..bc {
        for i in 0..ho {
            let yi = (i * stride) as isize - PAD;
            for j in 0..wo {
                let xj = (j * stride) as isize - PAD;
                let row = ((b * ho + i) * wo + j) * row_len;
                for ci in 0..cin {
                    let plane = (b * cin + ci) * h;
                    let cbase = row + ci * K * K;
                    for ki in 0..K {
                        let yy = yi + ki as isize;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let xrow = (plane + yy as usize) * w;
                        let src = cbase + ki * K;
                        for kj in 0..K {
                            let xx = xj + kj as isize;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            xs[xrow + xx as usize] = xs[xrow + xx as usize] + gs[src + kj];
                        }
                    }
                }
            }
        }
    }
    gx
}

/// (bc*ho*wo, cout) GEMM rows plus bias -> (bc, cout, ho, wo) feature maps.
fn rows_to_maps<F: Float>(
    rows: &Array2<F>,
    bias: &Array1<F>,
    bc: usize,
    cout: usize,
    ho: usize,
    wo: usize,
) -> Array4<F> {
    let mut y = Array4::<F>::zeros((bc, cout, ho, wo));
    let rs = rows.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    for b in 0..bc {
        for i in 0..ho {
            for j in 0..wo {
                let row = ((b * ho + i) * wo + j) * cout;
                let pix = i * wo + j;
                for co in 0..cout {
                    ys[((b * cout + co) * ho * wo) + pix] = rs[row + co] + bias[co];
                }
            }
        }
    }
    y
}

/// Inverse permutation of `rows_to_maps` (without bias) for gradients.
fn maps_to_rows<F: Float>(
    maps: &ArrayView4<F>,
    bc: usize,
    cout: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let mut rows = Array2::<F>::zeros((bc * ho * wo, cout));
    let ms = maps.to_slice().expect("chunk views are contiguous");
    let rs = rows.as_slice_mut().unwrap();
    for b in 0..bc {
        for co in 0..cout {
            let plane = (b * cout + co) * ho * wo;
            for i in 0..ho {
                for j in 0..wo {
                    let pix = i * wo + j;
                    rs[((b * ho + i) * wo + j) * cout + co] = ms[plane + pix];
                }
            }
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Direct convolution, the slow reference.
    fn conv_ref(x: &Array4<f64>, w: &Array4<f64>, b: &Array1<f64>, stride: usize) -> Array4<f64> {
        let (bs, cin, h, ww) = x.dim();
        let (cout, _, _, _) = w.dim();
        let ho = (h + 2 - K) / stride + 1;
        let wo = (ww + 2 - K) / stride + 1;
        Array4::from_shape_fn((bs, cout, ho, wo), |(bi, co, i, j)| {
            let mut acc = b[co];
            for ci in 0..cin {
                for ki in 0..K {
                    for kj in 0..K {
                        let y = (i * stride + ki) as isize - PAD;
                        let xx = (j * stride + kj) as isize - PAD;
                        if y >= 0 && y < h as isize && xx >= 0 && xx < ww as isize {
                            acc += x[[bi, ci, y as usize, xx as usize]] * w[[co, ci, ki, kj]];
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for stride in [1usize, 2] {
            let conv = Conv2d::<f64>::new(3, 5, stride, &mut rng);
            let x = super::super::randn::<f64, _>((2, 3, 6, 6), &mut rng);
            let got = conv.forward(&x);
            let want = conv_ref(&x, &conv.w, &conv.b, stride);
            assert_eq!(got.dim(), want.dim());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_input_agrees_with_full_backward() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut conv = Conv2d::<f64>::new(2, 4, 1, &mut rng);
        let x = super::super::randn::<f64, _>((3, 2, 5, 5), &mut rng);
        let y = conv.forward(&x);
        let gy = super::super::randn::<f64, _>(y.dim(), &mut rng);
        let gx_full = conv.backward(&x, &gy);
        let gx_only = conv.backward_input(&gy, (5, 5));
        for (a, b) in gx_full.iter().zip(gx_only.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn chunked_batches_match_single_chunk() {
        // A batch larger than PAR_CHUNK must give identical results to the
        // same images pushed through one by one.
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let conv = Conv2d::<f32>::new(1, 4, 1, &mut rng);
        let x = super::super::randn::<f32, _>((PAR_CHUNK * 2 + 3, 1, 8, 8), &mut rng);
        let all = conv.forward(&x);
        for bi in 0..x.dim().0 {
            let one = conv.forward(&x.slice(ndarray::s![bi..bi + 1, .., .., ..]).to_owned());
            for (a, b) in all.index_axis(Axis(0), bi).iter().zip(one.iter()) {
                assert_eq!(a, b);
            }
        }
    }
}
