use super::{gemm, layer_output, LayerSpec, MatRef, NetSpec, NnError, Real, Shape, Tensor};

#[derive(Debug, Clone)]
enum Op {
    Conv { k: usize, stride: usize, pad: usize, w: usize, b: usize },
    Relu,
    Maxpool,
    Dense { w: usize, b: usize },
    Skip { stages: Vec<Stage> },
}

#[derive(Debug, Clone)]
struct Stage {
    op: Op,
    input: Shape,
    output: Shape,
}

/// What a stage keeps from the forward pass for its reverse pass.
#[derive(Debug, Clone)]
pub enum Saved<T> {
    Input(Vec<T>),
    Output(Vec<T>),
    Argmax(Vec<u32>),
    Block(Vec<Saved<T>>),
}

/// Compiled [`NetSpec`]: shapes resolved and parameter offsets assigned into
/// one flat parameter vector (per layer: weights, then biases).
#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    stages: Vec<Stage>,
    param_count: usize,
    /// (offset, len, fan_in) of every weight tensor, for initialization.
    weights: Vec<(usize, usize, usize)>,
}

fn compile(
    input: Shape,
    layers: &[LayerSpec],
    next: &mut usize,
    weights: &mut Vec<(usize, usize, usize)>,
) -> Result<Vec<Stage>, NnError> {
    let mut stages = Vec::with_capacity(layers.len());
    let mut shape = input;
    for layer in layers {
        let output = layer_output(shape, layer)?;
        let op = match layer {
            LayerSpec::Conv { kernel, in_ch, out_ch, stride, pad } => {
                let fan_in = in_ch * kernel * kernel;
                let w = *next;
                weights.push((w, out_ch * fan_in, fan_in));
                *next += out_ch * fan_in;
                let b = *next;
                *next += out_ch;
                Op::Conv { k: *kernel, stride: *stride, pad: *pad, w, b }
            }
            LayerSpec::Relu => Op::Relu,
            LayerSpec::Maxpool => Op::Maxpool,
            LayerSpec::Dense { inputs, outputs } => {
                let w = *next;
                weights.push((w, inputs * outputs, *inputs));
                *next += inputs * outputs;
                let b = *next;
                *next += outputs;
                Op::Dense { w, b }
            }
            LayerSpec::ConcatSkip { block } => Op::Skip { stages: compile(shape, block, next, weights)? },
        };
        stages.push(Stage { op, input: shape, output });
        shape = output;
    }
    Ok(stages)
}

fn im2col<T: Real>(x: &[T], s: Shape, k: usize, stride: usize, pad: usize, out: Shape, cols: &mut [T]) {
    let p = out.h * out.w;
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * out.w..(oy + 1) * out.w];
                    if iy < 0 || iy >= s.h as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &x[(c * s.h + iy as usize) * s.w..][..s.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= s.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], s: Shape, k: usize, stride: usize, pad: usize, out: Shape, dx: &mut [T]) {
    let p = out.h * out.w;
    for c in 0..s.c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                for oy in 0..out.h {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let dst = &mut dx[(c * s.h + iy as usize) * s.w..][..s.w];
                    for ox in 0..out.w {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst[ix as usize] += row[oy * out.w + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Network {
    pub fn new(spec: &NetSpec) -> Result<Self, NnError> {
        spec.output_shape()?;
        let mut next = 0;
        let mut weights = Vec::new();
        let stages = compile(spec.input, &spec.layers, &mut next, &mut weights)?;
        Ok(Self { spec: spec.clone(), stages, param_count: next, weights })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_shape(&self) -> Shape {
        self.spec.input
    }

    pub fn output_shape(&self) -> Shape {
        self.stages.last().map_or(self.spec.input, |s| s.output)
    }

    pub(crate) fn weight_tensors(&self) -> &[(usize, usize, usize)] {
        &self.weights
    }

    fn check(&self, params_len: usize, x: &Tensor<impl Real>) -> Result<(), NnError> {
        if params_len != self.param_count {
            return Err(NnError::Shape(format!("{params_len} parameters, network has {}", self.param_count)));
        }
        if x.shape != self.spec.input || x.values.len() != x.batch * x.shape.len() {
            return Err(NnError::Shape(format!("input {} does not match {}", x.shape, self.spec.input)));
        }
        Ok(())
    }

    /// Forward pass that also returns what [`Network::backward`] needs.
    pub fn forward<T: Real>(&self, params: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Saved<T>>), NnError> {
        self.check(params.len(), x)?;
        let mut saved = Vec::with_capacity(self.stages.len());
        let out = run_forward(&self.stages, params, x.batch, x.values.clone(), Some(&mut saved));
        Ok((Tensor { batch: x.batch, shape: self.output_shape(), values: out }, saved))
    }

    /// Forward pass without keeping intermediates.
    pub fn infer<T: Real>(&self, params: &[T], x: &Tensor<T>) -> Result<Tensor<T>, NnError> {
        self.check(params.len(), x)?;
        let out = run_forward(&self.stages, params, x.batch, x.values.clone(), None);
        Ok(Tensor { batch: x.batch, shape: self.output_shape(), values: out })
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and returns
    /// the gradient with respect to the input batch.
    pub fn backward<T: Real>(
        &self,
        params: &[T],
        saved: &[Saved<T>],
        grad_out: &Tensor<T>,
        grads: &mut [T],
    ) -> Result<Tensor<T>, NnError> {
        if saved.len() != self.stages.len() {
            return Err(NnError::Shape("forward cache does not belong to this network".into()));
        }
        if grads.len() != self.param_count || params.len() != self.param_count {
            return Err(NnError::Shape("gradient buffer size".into()));
        }
        if grad_out.shape.len() != self.output_shape().len() {
            return Err(NnError::Shape(format!("output gradient {} vs {}", grad_out.shape, self.output_shape())));
        }
        let dx = run_backward(&self.stages, params, saved, grad_out.batch, grad_out.values.clone(), grads);
        Ok(Tensor { batch: grad_out.batch, shape: self.spec.input, values: dx })
    }
}

fn run_forward<T: Real>(
    stages: &[Stage],
    params: &[T],
    n: usize,
    mut x: Vec<T>,
    mut saved: Option<&mut Vec<Saved<T>>>,
) -> Vec<T> {
    for st in stages {
        let (si, so) = (st.input, st.output);
        let (li, lo) = (si.len(), so.len());
        let y = match &st.op {
            Op::Conv { k, stride, pad, w, b } => {
                let q = si.c * k * k;
                let p = so.h * so.w;
                let wm = MatRef::row_major(&params[*w..*w + so.c * q], so.c, q);
                let bias = &params[*b..*b + so.c];
                let mut cols = vec![T::zero(); q * p];
                let mut y = vec![T::zero(); n * lo];
                for e in 0..n {
                    im2col(&x[e * li..(e + 1) * li], si, *k, *stride, *pad, so, &mut cols);
                    let ye = &mut y[e * lo..(e + 1) * lo];
                    for (o, row) in ye.chunks_exact_mut(p).enumerate() {
                        row.iter_mut().for_each(|v| *v = bias[o]);
                    }
                    gemm(T::one(), wm, MatRef::row_major(&cols, q, p), T::one(), ye);
                }
                y
            }
            Op::Relu => x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Op::Maxpool => {
                let mut y = vec![T::zero(); n * lo];
                let mut arg = vec![0u32; n * lo];
                for e in 0..n {
                    let xe = &x[e * li..];
                    for c in 0..so.c {
                        for oy in 0..so.h {
                            for ox in 0..so.w {
                                let mut best = (c * si.h + 2 * oy) * si.w + 2 * ox;
                                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                                    let idx = (c * si.h + 2 * oy + dy) * si.w + 2 * ox + dx;
                                    if xe[idx] > xe[best] {
                                        best = idx;
                                    }
                                }
                                let o = e * lo + (c * so.h + oy) * so.w + ox;
                                y[o] = xe[best];
                                arg[o] = best as u32;
                            }
                        }
                    }
                }
                if let Some(s) = saved.as_deref_mut() {
                    s.push(Saved::Argmax(arg));
                }
                y
            }
            Op::Dense { w, b } => {
                let mut y = vec![T::zero(); n * lo];
                for row in y.chunks_exact_mut(lo) {
                    row.copy_from_slice(&params[*b..*b + lo]);
                }
                let wm = MatRef::row_major(&params[*w..*w + lo * li], lo, li);
                gemm(T::one(), MatRef::row_major(&x, n, li), wm.t(), T::one(), &mut y);
                y
            }
            Op::Skip { stages: inner } => {
                let mut inner_saved = saved.as_ref().map(|_| Vec::with_capacity(inner.len()));
                let z = run_forward(inner, params, n, x.clone(), inner_saved.as_mut());
                let lz = lo - li;
                let mut y = Vec::with_capacity(n * lo);
                for e in 0..n {
                    y.extend_from_slice(&x[e * li..(e + 1) * li]);
                    y.extend_from_slice(&z[e * lz..(e + 1) * lz]);
                }
                if let (Some(s), Some(b)) = (saved.as_deref_mut(), inner_saved) {
                    s.push(Saved::Block(b));
                }
                y
            }
        };
        if let Some(s) = saved.as_deref_mut() {
            match &st.op {
                Op::Conv { .. } | Op::Dense { .. } => s.push(Saved::Input(x)),
                Op::Relu => s.push(Saved::Output(y.clone())),
                Op::Maxpool | Op::Skip { .. } => {}
            }
        }
        x = y;
    }
    x
}

fn run_backward<T: Real>(
    stages: &[Stage],
    params: &[T],
    saved: &[Saved<T>],
    n: usize,
    mut g: Vec<T>,
    grads: &mut [T],
) -> Vec<T> {
    for (st, sv) in stages.iter().zip(saved).rev() {
        let (si, so) = (st.input, st.output);
        let (li, lo) = (si.len(), so.len());
        g = match (&st.op, sv) {
            (Op::Conv { k, stride, pad, w, b }, Saved::Input(x)) => {
                let q = si.c * k * k;
                let p = so.h * so.w;
                let mut cols = vec![T::zero(); q * p];
                let mut dcols = vec![T::zero(); q * p];
                let mut dx = vec![T::zero(); n * li];
                let wlen = so.c * q;
                let wm = MatRef::row_major(&params[*w..*w + wlen], so.c, q);
                for e in 0..n {
                    let ge = &g[e * lo..(e + 1) * lo];
                    im2col(&x[e * li..(e + 1) * li], si, *k, *stride, *pad, so, &mut cols);
                    gemm(
                        T::one(),
                        MatRef::row_major(ge, so.c, p),
                        MatRef::row_major(&cols, q, p).t(),
                        T::one(),
                        &mut grads[*w..*w + wlen],
                    );
                    for (o, row) in ge.chunks_exact(p).enumerate() {
                        grads[*b + o] += row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                    gemm(T::one(), wm.t(), MatRef::row_major(ge, so.c, p), T::zero(), &mut dcols);
                    col2im(&dcols, si, *k, *stride, *pad, so, &mut dx[e * li..(e + 1) * li]);
                }
                dx
            }
            (Op::Relu, Saved::Output(y)) => {
                g.iter().zip(y).map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() }).collect()
            }
            (Op::Maxpool, Saved::Argmax(arg)) => {
                let mut dx = vec![T::zero(); n * li];
                for e in 0..n {
                    for o in 0..lo {
                        dx[e * li + arg[e * lo + o] as usize] += g[e * lo + o];
                    }
                }
                dx
            }
            (Op::Dense { w, b }, Saved::Input(x)) => {
                let wlen = lo * li;
                gemm(
                    T::one(),
                    MatRef::row_major(&g, n, lo).t(),
                    MatRef::row_major(x, n, li),
                    T::one(),
                    &mut grads[*w..*w + wlen],
                );
                for row in g.chunks_exact(lo) {
                    for (gb, &v) in grads[*b..*b + lo].iter_mut().zip(row) {
                        *gb += v;
                    }
                }
                let mut dx = vec![T::zero(); n * li];
                gemm(
                    T::one(),
                    MatRef::row_major(&g, n, lo),
                    MatRef::row_major(&params[*w..*w + wlen], lo, li),
                    T::zero(),
                    &mut dx,
                );
                dx
            }
            (Op::Skip { stages: inner }, Saved::Block(inner_saved)) => {
                let lz = lo - li;
                let mut gx = Vec::with_capacity(n * li);
                let mut gz = Vec::with_capacity(n * lz);
                for e in 0..n {
                    gx.extend_from_slice(&g[e * lo..e * lo + li]);
                    gz.extend_from_slice(&g[e * lo + li..(e + 1) * lo]);
                }
                let dz = run_backward(inner, params, inner_saved, n, gz, grads);
                gx.iter_mut().zip(dz).for_each(|(a, b)| *a += b);
                gx
            }
            _ => unreachable!("forward cache out of step with the network"),
        };
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(layer: LayerSpec, input: Shape) -> Network {
        Network::new(&NetSpec { input, layers: vec![layer] }).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let net = single(LayerSpec::Conv { kernel: 1, in_ch: 1, out_ch: 1, stride: 1, pad: 0 }, Shape::new(1, 3, 4));
        let x = Tensor::new(1, Shape::new(1, 3, 4), (0..12).map(|v| v as f64 * 0.5 - 1.0).collect()).unwrap();
        let y = net.infer(&[1.0, 0.0], &x).unwrap();
        assert_eq!(y.values, x.values);
    }

    #[test]
    fn ones_kernel_sums_neighbourhood() {
        let net = single(LayerSpec::Conv { kernel: 3, in_ch: 1, out_ch: 1, stride: 1, pad: 1 }, Shape::new(1, 5, 5));
        let mut p = vec![1.0f32; 9];
        p.push(0.0);
        let x = Tensor::new(1, Shape::new(1, 5, 5), vec![0.7f32; 25]).unwrap();
        let y = net.infer(&p, &x).unwrap();
        assert!((y.values[2 * 5 + 2] - 9.0 * 0.7).abs() < 1e-6);
        // corner sees only 4 pixels through the zero padding
        assert!((y.values[0] - 4.0 * 0.7).abs() < 1e-6);
    }

    #[test]
    fn maxpool_picks_largest() {
        let net = single(LayerSpec::Maxpool, Shape::new(1, 2, 2));
        let x = Tensor::new(1, Shape::new(1, 2, 2), vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(net.infer(&[], &x).unwrap().values, vec![4.0]);
    }

    #[test]
    fn strided_conv_shape() {
        let net = single(LayerSpec::Conv { kernel: 3, in_ch: 2, out_ch: 4, stride: 2, pad: 1 }, Shape::new(2, 7, 6));
        assert_eq!(net.output_shape(), Shape::new(4, 4, 3));
        assert_eq!(net.param_count(), 4 * 2 * 9 + 4);
    }

    #[test]
    fn dense_weight_gradient_is_outer_product() {
        let net = single(LayerSpec::Dense { inputs: 3, outputs: 2 }, Shape::flat(3));
        let params: Vec<f64> = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.01, 0.02];
        let x = Tensor::new(1, Shape::flat(3), vec![1.0, 2.0, -1.0]).unwrap();
        let (y, saved) = net.forward(&params, &x).unwrap();
        assert!((y.values[0] - (0.1 - 0.4 - 0.3 + 0.01)).abs() < 1e-12);
        let g = Tensor::new(1, Shape::flat(2), vec![2.0, -3.0]).unwrap();
        let mut grads = vec![0.0; 8];
        let dx = net.backward(&params, &saved, &g, &mut grads).unwrap();
        assert_eq!(grads, vec![2.0, 4.0, -2.0, -3.0, -6.0, 3.0, 2.0, -3.0]);
        let expected = [2.0 * 0.1 - 3.0 * 0.4, 2.0 * -0.2 - 3.0 * 0.5, 2.0 * 0.3 - 3.0 * -0.6];
        assert!(dx.values.iter().zip(expected).all(|(a, b)| (a - b).abs() < 1e-15), "{:?}", dx.values);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = NetSpec::preset("conv-dense", 16).unwrap();
        let net = Network::new(&spec).unwrap();
        let params = crate::tinynn::init_params::<f64>(&net, 3);
        let x = Tensor::new(2, spec.input, (0..512).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let (y, saved) = net.forward(&params, &x).unwrap();
        let mut grads = vec![0.0; net.param_count()];
        let dx = net.backward(&params, &saved, &Tensor::zeros(2, y.shape), &mut grads).unwrap();
        assert!(grads.iter().all(|v| *v == 0.0));
        assert!(dx.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn forward_matches_infer_and_batching() {
        let spec = NetSpec::preset("conv-small", 16).unwrap();
        let net = Network::new(&spec).unwrap();
        let params = crate::tinynn::init_params::<f32>(&net, 11);
        let vals: Vec<f32> = (0..3 * 256).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
        let x = Tensor::new(3, spec.input, vals.clone()).unwrap();
        let (y, _) = net.forward(&params, &x).unwrap();
        assert_eq!(y.values, net.infer(&params, &x).unwrap().values);
        let one = Tensor::new(1, spec.input, vals[256..512].to_vec()).unwrap();
        assert_eq!(net.infer(&params, &one).unwrap().values, y.values[5..10].to_vec());
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let net = single(LayerSpec::Relu, Shape::new(1, 4, 4));
        let x = Tensor::<f32>::zeros(1, Shape::new(1, 4, 5));
        assert!(net.infer(&[], &x).is_err());
    }
}
