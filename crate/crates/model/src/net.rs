//! Forward and reverse passes over a flat parameter vector, generic over
//! the float type (f32 for training, f64 for gradient checks).
//!
//! Feature maps are stored channel-last as `(batch * pixels, channels)` so
//! every layer, convolutions included (via im2col), is a matrix product.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, NdFloat};
use num_traits::cast;

use crate::config::{ModelConfig, N_STATIC};
use crate::error::{ModelError, Result};

/// Offsets of one affine map `y = x W + b` inside the parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    fn alloc(offset: &mut usize, n_in: usize, n_out: usize) -> Self {
        let w = *offset;
        let b = w + n_in * n_out;
        *offset = b + n_out;
        Self { w, b, n_in, n_out }
    }

    pub fn n_params(&self) -> usize {
        self.n_in * self.n_out + self.n_out
    }

    fn weights<'a, F>(&self, p: &'a [F]) -> ArrayView2<'a, F> {
        ArrayView2::from_shape((self.n_in, self.n_out), &p[self.w..self.b]).expect("weight block")
    }

    fn bias<'a, F>(&self, p: &'a [F]) -> ArrayView1<'a, F> {
        ArrayView1::from(&p[self.b..self.b + self.n_out])
    }

    fn apply<F: NdFloat>(&self, p: &[F], x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weights(p));
        y += &self.bias(p);
        y
    }

    /// Adds `x^T dy` and the column sums of `dy` to the gradient.
    fn accumulate<F: NdFloat>(&self, g: &mut [F], x: ArrayView2<F>, dy: ArrayView2<F>) {
        let mut gw = ArrayViewMut2::from_shape((self.n_in, self.n_out), &mut g[self.w..self.b]).expect("weight block");
        general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut gw);
        for (j, v) in dy.sum_axis(Axis(0)).iter().enumerate() {
            g[self.b + j] += *v;
        }
    }

    fn backprop<F: NdFloat>(&self, p: &[F], dy: ArrayView2<F>) -> Array2<F> {
        dy.dot(&self.weights(p).t())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvBlock {
    pub cin: usize,
    pub cout: usize,
    pub conv1: Dense,
    pub conv2: Dense,
    /// 1×1 projection when the channel count changes.
    pub skip: Option<Dense>,
    pub relu_out: bool,
}

/// Parameter layout of a model config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: Dense,
    pub linear: Vec<(Dense, Dense)>,
    pub convs: Vec<ConvBlock>,
    pub n_params: usize,
    pub nlat: usize,
    pub nlon: usize,
    pub kernel: usize,
    pub embed_dim: usize,
}

impl Architecture {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut off = 0;
        let n = cfg.embed_dim;
        let input = Dense::alloc(&mut off, cfg.input_dim(), n);
        let linear = (0..2)
            .map(|_| (Dense::alloc(&mut off, n, cfg.hidden), Dense::alloc(&mut off, cfg.hidden, n)))
            .collect();
        let channels = cfg.channels()?;
        let kk = cfg.kernel * cfg.kernel;
        let n_blocks = channels.len() - 1;
        let convs = channels
            .windows(2)
            .enumerate()
            .map(|(i, c)| ConvBlock {
                cin: c[0],
                cout: c[1],
                conv1: Dense::alloc(&mut off, kk * c[0], c[1]),
                conv2: Dense::alloc(&mut off, kk * c[1], c[1]),
                skip: (c[0] != c[1]).then(|| Dense::alloc(&mut off, c[0], c[1])),
                // the output layer must be able to go negative
                relu_out: i + 1 < n_blocks,
            })
            .collect();
        Ok(Self {
            input,
            linear,
            convs,
            n_params: off,
            nlat: cfg.grid_shape.0,
            nlon: cfg.grid_shape.1,
            kernel: cfg.kernel,
            embed_dim: n,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.nlat * self.nlon
    }

    /// Named affine maps in parameter order.
    pub fn tensors(&self) -> Vec<(String, Dense)> {
        let mut out = vec![("input".to_string(), self.input)];
        for (i, (a, b)) in self.linear.iter().enumerate() {
            out.push((format!("linear{i}.fc1"), *a));
            out.push((format!("linear{i}.fc2"), *b));
        }
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.conv1"), c.conv1));
            out.push((format!("conv{i}.conv2"), c.conv2));
            if let Some(s) = c.skip {
                out.push((format!("conv{i}.skip"), s));
            }
        }
        out
    }
}

struct ConvCache<F> {
    x: Array2<F>,
    cols1: Array2<F>,
    y1: Array2<F>,
    cols2: Array2<F>,
    out: Array2<F>,
}

/// Activations kept for the reverse pass.
pub struct Cache<F> {
    x: Array2<F>,
    a0: Array2<F>,
    linear: Vec<(Array2<F>, Array2<F>, Array2<F>)>,
    convs: Vec<ConvCache<F>>,
    batch: usize,
}

pub fn to_float<F: NdFloat>(x: f64) -> F {
    cast(x).expect("representable")
}

fn relu<F: NdFloat>(mut a: Array2<F>) -> Array2<F> {
    a.mapv_inplace(|v| if v > F::zero() { v } else { F::zero() });
    a
}

fn relu_mask<F: NdFloat>(grad: &mut Array2<F>, act: &Array2<F>) {
    grad.zip_mut_with(act, |g, a| {
        if *a <= F::zero() {
            *g = F::zero();
        }
    });
}

fn check<F: NdFloat>(a: &Array2<F>, layer: impl Fn() -> String) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(ModelError::NonFinite { layer: layer() })
    }
}

/// Kernel columns `dj0..dj1` that stay inside a row of width `nlon` at column `j`.
fn tap_range(j: usize, nlon: usize, k: usize, r: isize) -> (usize, usize) {
    let r = r as usize;
    (r.saturating_sub(j), k.min(nlon + r - j))
}

fn im2col<F: NdFloat>(x: &Array2<F>, arch: &Architecture, batch: usize) -> Array2<F> {
    let (nlat, nlon, k) = (arch.nlat, arch.nlon, arch.kernel);
    let r = (k / 2) as isize;
    let c = x.ncols();
    let width = k * k * c;
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    // every entry is written once, padding included
    let mut cs = Vec::with_capacity(x.nrows() * width);
    for b in 0..batch {
        for i in 0..nlat {
            for j in 0..nlon {
                let (dj0, dj1) = tap_range(j, nlon, k, r);
                for di in 0..k {
                    let ii = i as isize + di as isize - r;
                    if ii < 0 || ii >= nlat as isize {
                        cs.resize(cs.len() + k * c, F::zero());
                        continue;
                    }
                    // valid taps of one kernel row read adjacent pixels
                    let src = (b * nlat + ii as usize) * nlon + (j + dj0) - r as usize;
                    cs.resize(cs.len() + dj0 * c, F::zero());
                    cs.extend_from_slice(&xs[src * c..src * c + (dj1 - dj0) * c]);
                    cs.resize(cs.len() + (k - dj1) * c, F::zero());
                }
            }
        }
    }
    Array2::from_shape_vec((x.nrows(), width), cs).expect("im2col shape")
}

fn col2im<F: NdFloat>(cols: &Array2<F>, arch: &Architecture, batch: usize, c: usize) -> Array2<F> {
    let (nlat, nlon, k) = (arch.nlat, arch.nlon, arch.kernel);
    let r = (k / 2) as isize;
    let width = k * k * c;
    let mut x = Array2::zeros((cols.nrows(), c));
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("standard layout");
    for b in 0..batch {
        for i in 0..nlat {
            for j in 0..nlon {
                let row = (b * nlat + i) * nlon + j;
                let srcrow = &cs[row * width..(row + 1) * width];
                let (dj0, dj1) = tap_range(j, nlon, k, r);
                for di in 0..k {
                    let ii = i as isize + di as isize - r;
                    if ii < 0 || ii >= nlat as isize {
                        continue;
                    }
                    let dst = (b * nlat + ii as usize) * nlon + (j + dj0) - r as usize;
                    let o = (di * k + dj0) * c;
                    let len = (dj1 - dj0) * c;
                    for (a, v) in xs[dst * c..dst * c + len].iter_mut().zip(&srcrow[o..o + len]) {
                        *a += *v;
                    }
                }
            }
        }
    }
    x
}

/// Forward pass for a batch of encoded inputs `(batch, input_dim)` with
/// static features `(pixels, 4)`. Returns `(batch, pixels)` predictions in
/// target units and, if requested, the activations for [`backward`].
pub fn forward<F: NdFloat>(
    arch: &Architecture,
    params: &[F],
    x: ArrayView2<F>,
    statics: ArrayView2<F>,
    output_scale: F,
    keep: bool,
) -> Result<(Array2<F>, Option<Cache<F>>)> {
    if params.len() != arch.n_params {
        return Err(ModelError::ShapeMismatch(format!("{} parameters, expected {}", params.len(), arch.n_params)));
    }
    if x.ncols() != arch.input.n_in {
        return Err(ModelError::ShapeMismatch(format!("input width {}, expected {}", x.ncols(), arch.input.n_in)));
    }
    let np = arch.n_pixels();
    if statics.dim() != (np, N_STATIC) {
        return Err(ModelError::ShapeMismatch(format!("static features {:?}, expected ({np}, 4)", statics.dim())));
    }
    let batch = x.nrows();
    let a0 = relu(arch.input.apply(params, x));
    check(&a0, || "input".into())?;
    let mut lin_cache = Vec::new();
    let mut a = a0.clone();
    for (i, (fc1, fc2)) in arch.linear.iter().enumerate() {
        let h = relu(fc1.apply(params, a.view()));
        let mut o = fc2.apply(params, h.view());
        o += &a;
        let out = relu(o);
        check(&out, || format!("linear{i}"))?;
        if keep {
            lin_cache.push((a, h, out.clone()));
        }
        a = out;
    }
    let n = arch.embed_dim;
    let mut fmap = Array2::<F>::zeros((batch * np, n + N_STATIC));
    for b in 0..batch {
        for p in 0..np {
            let mut row = fmap.row_mut(b * np + p);
            row.slice_mut(s![..n]).assign(&a.row(b));
            row.slice_mut(s![n..]).assign(&statics.row(p));
        }
    }
    let mut conv_cache = Vec::new();
    for (i, blk) in arch.convs.iter().enumerate() {
        let cols1 = im2col(&fmap, arch, batch);
        let y1 = relu(blk.conv1.apply(params, cols1.view()));
        let cols2 = im2col(&y1, arch, batch);
        let mut out = blk.conv2.apply(params, cols2.view());
        match &blk.skip {
            Some(sk) => out += &sk.apply(params, fmap.view()),
            None => out += &fmap,
        }
        if blk.relu_out {
            out = relu(out);
        }
        check(&out, || format!("conv{i}"))?;
        let next = out.clone();
        if keep {
            conv_cache.push(ConvCache {
                x: fmap,
                cols1,
                y1,
                cols2,
                out,
            });
        }
        fmap = next;
    }
    let pred = fmap.into_shape_with_order((batch, np)).expect("one channel") * output_scale;
    let cache = keep.then_some(Cache {
        x: x.to_owned(),
        a0,
        linear: lin_cache,
        convs: conv_cache,
        batch,
    });
    Ok((pred, cache))
}

/// Accumulates into `grad` the gradient of a loss whose derivative with
/// respect to the predictions is `dpred` `(batch, pixels)`.
pub fn backward<F: NdFloat>(
    arch: &Architecture,
    params: &[F],
    cache: &Cache<F>,
    dpred: ArrayView2<F>,
    output_scale: F,
    grad: &mut [F],
) {
    let batch = cache.batch;
    let np = arch.n_pixels();
    let mut d = dpred.to_owned().into_shape_with_order((batch * np, 1)).expect("contiguous") * output_scale;
    for (blk, cc) in arch.convs.iter().zip(&cache.convs).rev() {
        if blk.relu_out {
            relu_mask(&mut d, &cc.out);
        }
        blk.conv2.accumulate(grad, cc.cols2.view(), d.view());
        let mut dy1 = col2im(&blk.conv2.backprop(params, d.view()), arch, batch, blk.cout);
        relu_mask(&mut dy1, &cc.y1);
        blk.conv1.accumulate(grad, cc.cols1.view(), dy1.view());
        let mut dx = col2im(&blk.conv1.backprop(params, dy1.view()), arch, batch, blk.cin);
        match &blk.skip {
            Some(sk) => {
                sk.accumulate(grad, cc.x.view(), d.view());
                dx += &sk.backprop(params, d.view());
            }
            None => dx += &d,
        }
        d = dx;
    }
    let n = arch.embed_dim;
    let mut de = Array2::<F>::zeros((batch, n));
    for b in 0..batch {
        let block = d.slice(s![b * np..(b + 1) * np, ..n]);
        de.row_mut(b).assign(&block.sum_axis(Axis(0)));
    }
    for ((fc1, fc2), (a_in, h, a_out)) in arch.linear.iter().zip(&cache.linear).rev() {
        relu_mask(&mut de, a_out);
        fc2.accumulate(grad, h.view(), de.view());
        let mut dh = fc2.backprop(params, de.view());
        relu_mask(&mut dh, h);
        fc1.accumulate(grad, a_in.view(), dh.view());
        de += &fc1.backprop(params, dh.view());
    }
    relu_mask(&mut de, &cache.a0);
    arch.input.accumulate(grad, cache.x.view(), de.view());
}

/// Mean squared error over unmasked pixels and its derivative.
pub fn mse_and_grad<F: NdFloat>(
    pred: ArrayView2<F>,
    target: ArrayView2<F>,
    mask: Option<&[bool]>,
    denom: usize,
) -> (F, Array2<F>) {
    let mut d = Array2::zeros(pred.raw_dim());
    let mut sum = F::zero();
    let scale = to_float::<F>(2.0 / denom as f64);
    for ((dv, p), t) in d.indexed_iter_mut().zip(pred.iter()).zip(target.iter()) {
        let ((_, px), dv) = dv;
        if mask.is_none_or(|m| m[px]) {
            let r = *p - *t;
            sum += r * r;
            *dv = scale * r;
        }
    }
    (sum / to_float(denom as f64), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_indices: 2,
            hidden: 5,
            embed_dim: 4,
            schedule: crate::config::ChannelSchedule::Halving,
            grid_shape: (3, 4),
            param_bounds: None,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_budget() {
        let arch = Architecture::new(&ModelConfig::default()).unwrap();
        assert_eq!(arch.convs.len(), 5);
        assert_eq!(arch.n_params, 10_626 + 114 * 160);
        assert_eq!(arch.tensors().iter().map(|(_, d)| d.n_params()).sum::<usize>(), arch.n_params);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        let arch = Architecture::new(&tiny()).unwrap();
        let x = Array2::from_shape_fn((2 * 12, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 1.0);
        let y = Array2::from_shape_fn((2 * 12, 27), |(i, j)| ((i * 7 + j * 3) % 11) as f64 - 5.0);
        let lhs: f64 = (&im2col(&x, &arch, 2) * &y).sum();
        let rhs: f64 = (&x * &col2im(&y, &arch, 2, 3)).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn mse_values() {
        let p = Array2::from_elem((1, 4), 3.0);
        let t = Array2::from_elem((1, 4), 1.0);
        assert_eq!(mse_and_grad(p.view(), p.view(), None, 4).0, 0.0);
        assert_eq!(mse_and_grad(p.view(), t.view(), None, 4).0, 4.0);
        let half = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 3.0, 3.0]).unwrap();
        assert_eq!(mse_and_grad(half.view(), t.view(), None, 4).0, 2.0);
        let mask = [false, false, true, true];
        let (l, d) = mse_and_grad(half.view(), t.view(), Some(&mask), 2);
        assert_eq!(l, 4.0);
        assert_eq!(d.row(0).to_vec(), vec![0.0, 0.0, 2.0, 2.0]);
    }
}
