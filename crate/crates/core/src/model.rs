//! The recurrent variational network: ConvGRU cells, the recurrent unit, the
//! recurrent state initializer, the k-space block update and the unrolled
//! forward pass.
//!
//! Everything is built on [`Graph`], so the same code serves inference (with a
//! non-trainable binding) and training (with trainable leaves).

use std::rc::Rc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ModelConfig, RsiInput};
use crate::error::{Error, Result};
use crate::nn::layers::{conv, conv_same};
use crate::nn::{Bound, ConvGeom, Graph, PadMode, Pads, ParamStore, Var};
use crate::operators::{CoilSensitivityMaps, MultiCoilKSpace};
use crate::real::Real;
use crate::sampling::SamplingMask;
use crate::sensitivity::{
    estimate_initial_maps, init_ser_params, map_support, refine_maps_graph, ser_param_count,
    DEFAULT_EPS,
};
use crate::tensor::Tensor;

/// Per-layer recurrent state `(h^1, ..., h^{n_l})`, each `[1, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T: Real> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Real> HiddenState<T> {
    pub fn zeros(n_layers: usize, channels: usize, ny: usize, nx: usize) -> Self {
        Self {
            layers: (0..n_layers)
                .map(|_| Tensor::zeros(&[1, channels, ny, nx]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|t| t.is_finite())
    }
}

/// Sub-sampled k-space and the mask it was acquired with.
#[derive(Clone, Debug)]
pub struct ModelInput<T: Real = f32> {
    pub kspace: MultiCoilKSpace<T>,
    pub mask: SamplingMask,
}

/// Final k-space prediction `y_T`, the RSS image `x_T` and the sensitivity maps
/// used along the way.
#[derive(Clone, Debug)]
pub struct ModelOutput<T: Real = f32> {
    pub kspace: MultiCoilKSpace<T>,
    pub image: Array2<T>,
    pub maps: CoilSensitivityMaps<T>,
}

/// Graph nodes produced by [`forward_graph`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub kspace: Var,
    pub image: Var,
    pub maps: Var,
}

fn conv_count(cout: usize, cin: usize, k: usize) -> usize {
    cout * cin * k * k + cout
}

fn rsi_in_channels(cfg: &ModelConfig) -> usize {
    match cfg.rsi_input {
        RsiInput::Sense => 2,
        RsiInput::Rss => 1,
    }
}

/// Name prefix of the recurrent unit used at step `t` (0-based).
pub fn unit_prefix(cfg: &ModelConfig, t: usize) -> String {
    if cfg.share_weights {
        "unit0".into()
    } else {
        format!("unit{t}")
    }
}

fn n_units(cfg: &ModelConfig) -> usize {
    if cfg.share_weights {
        1
    } else {
        cfg.time_steps
    }
}

/// Scalar parameter count implied by a configuration.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    let c = cfg.hidden_channels;
    let mut n = 0;
    if cfg.use_ser {
        n += ser_param_count(&cfg.ser_filters);
    }
    if cfg.use_rsi {
        let mut cin = rsi_in_channels(cfg);
        for &f in &cfg.rsi_filters {
            n += conv_count(f, cin, 3);
            cin = f;
        }
        n += cfg.recurrent_layers * conv_count(c, cin, 1);
    }
    let gru = 3 * conv_count(c, 2 * c, 3);
    let unit = conv_count(c, 2, 5) + cfg.recurrent_layers * (conv_count(c, c, 3) + gru) + conv_count(2, c, 3);
    n + n_units(cfg) * unit + cfg.time_steps
}

/// Parameters of a freshly initialized model.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let c = cfg.hidden_channels;
    if cfg.use_ser {
        init_ser_params(&mut store, &cfg.ser_filters, &mut rng);
    }
    if cfg.use_rsi {
        let mut cin = rsi_in_channels(cfg);
        for (i, &f) in cfg.rsi_filters.iter().enumerate() {
            store.add_conv(&format!("rsi.conv{i}"), f, cin, 3, &mut rng);
            cin = f;
        }
        for j in 0..cfg.recurrent_layers {
            store.add_conv(&format!("rsi.out{j}"), c, cin, 1, &mut rng);
        }
    }
    for u in 0..n_units(cfg) {
        let prefix = format!("unit{u}");
        store.add_conv(&format!("{prefix}.conv_in"), c, 2, 5, &mut rng);
        for i in 0..cfg.recurrent_layers {
            store.add_conv(&format!("{prefix}.layer{i}.conv"), c, c, 3, &mut rng);
            for gate in ["update", "reset", "candidate"] {
                store.add_conv(&format!("{prefix}.layer{i}.gru.{gate}"), c, 2 * c, 3, &mut rng);
            }
        }
        store.add_conv(&format!("{prefix}.conv_out"), 2, c, 3, &mut rng);
    }
    for t in 0..cfg.time_steps {
        store.insert(format!("alpha{t}"), Tensor::new(vec![1], vec![T::one()]));
    }
    if cfg.zero_refinement {
        store.zero_prefix("unit");
    }
    Ok(store)
}

/// One ConvGRU update
/// `z = sigma(W_z [x, h])`, `r = sigma(W_r [x, h])`,
/// `h~ = tanh(W_h [x, r * h])`, `h' = (1 - z) * h + z * h~`.
pub fn convgru_step<T: Real>(p: &Bound<T>, prefix: &str, x: Var, h: Var) -> Var {
    let g = p.graph;
    let xh = g.concat(&[x, h]);
    let z = g.sigmoid(conv_same(p, &format!("{prefix}.update"), xh));
    let r = g.sigmoid(conv_same(p, &format!("{prefix}.reset"), xh));
    let xrh = g.concat(&[x, g.mul(r, h)]);
    let cand = g.tanh(conv_same(p, &format!("{prefix}.candidate"), xrh));
    let keep = g.mul(g.affine(z, -T::one(), T::one()), h);
    g.add(keep, g.mul(z, cand))
}

/// The recurrent unit: image `[1, 2, H, W]` and state to the refinement term
/// `w` (`[1, 2, H, W]`) and the next state.
pub fn recurrent_unit_forward<T: Real>(
    p: &Bound<T>,
    prefix: &str,
    img: Var,
    h: &[Var],
) -> (Var, Vec<Var>) {
    let g = p.graph;
    let mut x = g.relu(conv_same(p, &format!("{prefix}.conv_in"), img));
    let mut next = Vec::with_capacity(h.len());
    for (i, &hi) in h.iter().enumerate() {
        x = g.relu(conv_same(p, &format!("{prefix}.layer{i}.conv"), x));
        x = convgru_step(p, &format!("{prefix}.layer{i}.gru"), x, hi);
        next.push(x);
    }
    (conv_same(p, &format!("{prefix}.conv_out"), x), next)
}

/// Initial state from an image (`[1, 2, H, W]` SENSE or `[1, 1, H, W]` RSS):
/// replication-padded dilated 3x3 convolutions with ReLU, then one 1x1
/// convolution plus ReLU per recurrent layer.
pub fn rsi_forward<T: Real>(p: &Bound<T>, cfg: &ModelConfig, input: Var) -> Vec<Var> {
    let g = p.graph;
    let mut x = input;
    for (i, &d) in cfg.rsi_dilations.iter().enumerate() {
        let padded = g.pad(x, Pads::uniform(d), PadMode::Replicate);
        x = g.relu(conv(p, &format!("rsi.conv{i}"), padded, ConvGeom { pad: 0, dilation: d }));
    }
    (0..cfg.recurrent_layers)
        .map(|j| g.relu(conv(p, &format!("rsi.out{j}"), x, ConvGeom::same(1, 1))))
        .collect()
}

/// The k-space update
/// `y' = y - alpha * U(y - y0) + F(E(w))` with `w, h' = H(R(F^-1 y), h)`.
#[allow(clippy::too_many_arguments)]
pub fn block_step<T: Real>(
    p: &Bound<T>,
    prefix: &str,
    alpha: Var,
    y: Var,
    y0: Var,
    mask: &Rc<Vec<T>>,
    maps: Var,
    h: &[Var],
) -> (Var, Vec<Var>) {
    let g = p.graph;
    let img = g.reduce(g.fft2c(y, true), maps);
    let (w, next) = recurrent_unit_forward(p, prefix, img, h);
    let residual = g.mask(g.sub(y, y0), mask.clone());
    let dc = g.scale_by(residual, alpha);
    let refinement = g.fft2c(g.expand(w, maps), false);
    (g.add(g.sub(y, dc), refinement), next)
}

fn check_input<T: Real>(input: &ModelInput<T>) -> Result<()> {
    let (ny, nx) = input.kspace.spatial();
    if input.mask.shape() != (ny, nx) {
        return Err(Error::Shape(format!(
            "mask is {:?} but k-space is {ny}x{nx}",
            input.mask.shape()
        )));
    }
    if input.kspace.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("input k-space".into()));
    }
    Ok(())
}

/// Records the full unrolled forward pass in `p.graph`.
pub fn forward_graph<T: Real>(
    p: &Bound<T>,
    cfg: &ModelConfig,
    input: &ModelInput<T>,
) -> Result<ForwardVars> {
    check_input(input)?;
    let g = p.graph;
    let (ny, nx) = input.kspace.spatial();
    let init = estimate_initial_maps(&input.kspace, &input.mask, DEFAULT_EPS)?;
    let init_var = g.constant(Tensor::from_complex(&init.maps));
    let maps = if cfg.use_ser {
        let support: Vec<bool> = map_support(&init).iter().copied().collect();
        refine_maps_graph(p, init_var, &support, &cfg.ser_filters, cfg.ser_leaky_slope)
    } else {
        init_var
    };
    let y0 = g.constant(Tensor::from_complex(&input.kspace.data));
    let mut h: Vec<Var> = if cfg.use_rsi {
        let coils = g.fft2c(y0, true);
        let rsi_in = match cfg.rsi_input {
            RsiInput::Sense => g.reduce(coils, maps),
            RsiInput::Rss => g.rss(coils),
        };
        rsi_forward(p, cfg, rsi_in)
    } else {
        (0..cfg.recurrent_layers)
            .map(|_| g.constant(Tensor::zeros(&[1, cfg.hidden_channels, ny, nx])))
            .collect()
    };
    let mask: Rc<Vec<T>> = Rc::new(
        input
            .mask
            .mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect(),
    );
    let mut y = y0;
    for t in 0..cfg.time_steps {
        let alpha = p.param(&format!("alpha{t}"));
        let (next_y, next_h) = block_step(p, &unit_prefix(cfg, t), alpha, y, y0, &mask, maps, &h);
        y = next_y;
        h = next_h;
    }
    let image = g.rss(g.fft2c(y, true));
    Ok(ForwardVars { kspace: y, image, maps })
}

/// A configured network and its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentVarNet<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> RecurrentVarNet<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let expected = init_params::<T>(&config, 0)?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(Error::InvalidArgument(format!("missing parameter {name}"))),
            }
        }
        if params.len() != expected.len() {
            let extra: Vec<_> = params.names().filter(|n| expected.get(n).is_none()).cloned().collect();
            return Err(Error::InvalidArgument(format!("unexpected parameters: {}", extra.join(", "))));
        }
        Ok(Self { config, params })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn forward(&self, input: &ModelInput<T>) -> Result<ModelOutput<T>> {
        let g = Graph::new();
        let p = Bound::new(&g, &self.params, false);
        let vars = forward_graph(&p, &self.config, input)?;
        let image = g.value(vars.image);
        if !image.is_finite() {
            return Err(Error::NonFinite("model output".into()));
        }
        Ok(ModelOutput {
            kspace: MultiCoilKSpace::new(g.value(vars.kspace).to_complex())?,
            image: image.to_image(),
            maps: CoilSensitivityMaps::new(g.value(vars.maps).to_complex())?,
        })
    }

    pub fn cast<U: Real>(&self) -> RecurrentVarNet<U> {
        RecurrentVarNet {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

/// `(y_T, x_T)` for sub-sampled k-space `ksp` acquired with `mask`.
pub fn model_forward<T: Real>(
    ksp: &MultiCoilKSpace<T>,
    mask: &SamplingMask,
    net: &RecurrentVarNet<T>,
) -> Result<(MultiCoilKSpace<T>, Array2<T>)> {
    let out = net.forward(&ModelInput {
        kspace: ksp.clone(),
        mask: mask.clone(),
    })?;
    Ok((out.kspace, out.image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{finite_differences, gather, relative_error, sample_coordinates};
    use crate::operators::{apply_mask, expand, fft2c, Image};
    use crate::sampling::random_cartesian_mask;
    use ndarray::Array3;
    use num_complex::Complex;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn small_config(c: usize, n_l: usize, t: usize) -> ModelConfig {
        ModelConfig {
            time_steps: t,
            recurrent_layers: n_l,
            hidden_channels: c,
            ..ModelConfig::default()
        }
    }

    fn gru_store<T: Real>(c: usize, seed: u64) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        for gate in ["update", "reset", "candidate"] {
            s.add_conv(&format!("g.{gate}"), c, 2 * c, 3, &mut rng);
        }
        s
    }

    // Weighted sum of the new state: a generic linear read-out.
    fn gru_objective<T: Real>(store: &ParamStore<T>, trainable: bool, x: &Tensor<f64>, h: &Tensor<f64>, r: &Tensor<f64>) -> (f64, Option<ParamStore<T>>) {
        let g = Graph::new();
        let p = Bound::new(&g, store, trainable);
        let out = convgru_step(&p, "g", g.constant(x.cast()), g.constant(h.cast()));
        let l = g.mean(g.mul(out, g.constant(r.cast())));
        let v = g.value(l).data()[0].to_f64().unwrap();
        let grads = trainable.then(|| p.gradients(&mut g.backward(l)));
        (v, grads)
    }

    #[test]
    fn convgru_with_zero_weights_halves_the_state() {
        let mut store = gru_store::<f64>(3, 0);
        store.zero_prefix("g");
        let x = rand_tensor(&[1, 3, 5, 7], 1);
        let h = rand_tensor(&[1, 3, 5, 7], 2);
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let out = g.value(convgru_step(&p, "g", g.constant(x), g.constant(h.clone())));
        assert_eq!(out.shape(), h.shape());
        for (o, v) in out.data().iter().zip(h.data()) {
            assert_eq!(*o, 0.5 * v);
        }
    }

    #[test]
    fn convgru_gate_gradients_match_finite_differences() {
        let c = 2;
        let store = gru_store::<f64>(c, 3);
        let x = rand_tensor(&[1, c, 8, 8], 4);
        let h = rand_tensor(&[1, c, 8, 8], 5);
        let r = rand_tensor(&[1, c, 8, 8], 6);
        let coords = sample_coordinates(&store, "g", usize::MAX, 0);
        let fd = finite_differences(&store, &coords, 1e-6, |s| gru_objective(s, false, &x, &h, &r).0);
        let a64 = gather(&gru_objective(&store, true, &x, &h, &r).1.unwrap(), &coords);
        let a32 = gather(&gru_objective(&store.cast::<f32>(), true, &x, &h, &r).1.unwrap(), &coords);
        assert!(relative_error(&a64, &fd) < 1e-5, "{}", relative_error(&a64, &fd));
        assert!(relative_error(&a32, &fd) < 1e-3, "{}", relative_error(&a32, &fd));
    }

    fn unit_objective<T: Real>(store: &ParamStore<T>, trainable: bool, img: &Tensor<f64>, hs: &[Tensor<f64>], r: &Tensor<f64>) -> (f64, Option<ParamStore<T>>) {
        let g = Graph::new();
        let p = Bound::new(&g, store, trainable);
        let h: Vec<Var> = hs.iter().map(|t| g.constant(t.cast())).collect();
        let (w, next) = recurrent_unit_forward(&p, "unit0", g.constant(img.cast()), &h);
        let mut l = g.mean(g.mul(w, g.constant(r.cast())));
        for n in next {
            l = g.add(l, g.mean(g.mul(n, n)));
        }
        let v = g.value(l).data()[0].to_f64().unwrap();
        let grads = trainable.then(|| p.gradients(&mut g.backward(l)));
        (v, grads)
    }

    #[test]
    fn recurrent_unit_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            use_ser: false,
            use_rsi: false,
            ..small_config(8, 2, 1)
        };
        let store = init_params::<f64>(&cfg, 7).unwrap();
        let img = rand_tensor(&[1, 2, 8, 8], 8);
        let hs = vec![rand_tensor(&[1, 8, 8, 8], 9), rand_tensor(&[1, 8, 8, 8], 10)];
        let r = rand_tensor(&[1, 2, 8, 8], 11);
        let coords = sample_coordinates(&store, "unit0", 80, 1);
        let fd = finite_differences(&store, &coords, 1e-6, |s| unit_objective(s, false, &img, &hs, &r).0);
        let a64 = gather(&unit_objective(&store, true, &img, &hs, &r).1.unwrap(), &coords);
        let a32 = gather(&unit_objective(&store.cast::<f32>(), true, &img, &hs, &r).1.unwrap(), &coords);
        assert!(relative_error(&a64, &fd) < 1e-5, "{}", relative_error(&a64, &fd));
        assert!(relative_error(&a32, &fd) < 1e-3, "{}", relative_error(&a32, &fd));
    }

    #[test]
    fn recurrent_unit_shapes_and_purity() {
        let cfg = ModelConfig {
            use_ser: false,
            use_rsi: false,
            ..small_config(4, 3, 1)
        };
        let store = init_params::<f64>(&cfg, 1).unwrap();
        let img = rand_tensor(&[1, 2, 6, 9], 2);
        let run = || {
            let g = Graph::new();
            let p = Bound::new(&g, &store, false);
            let h: Vec<Var> = (0..3).map(|_| g.constant(Tensor::zeros(&[1, 4, 6, 9]))).collect();
            let (w, next) = recurrent_unit_forward(&p, "unit0", g.constant(img.clone()), &h);
            let next: Vec<Tensor<f64>> = next.iter().map(|&v| (*g.value(v)).clone()).collect();
            ((*g.value(w)).clone(), next)
        };
        let (w, next) = run();
        assert_eq!(w.shape(), &[1, 2, 6, 9]);
        assert!(next.iter().all(|t| t.shape() == [1, 4, 6, 9]));
        assert_eq!((w, next), run());
    }

    fn toy_input(nc: usize, n: usize, r: f64, seed: u64) -> ModelInput<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Array3::from_shape_fn((nc, n, n), |(_, y, x)| {
            let bump = (-(((y as f64 - n as f64 / 2.0).powi(2) + (x as f64 - n as f64 / 2.0).powi(2)) / (n as f64))).exp();
            Complex::new(bump + 0.1 * rng.random_range(-1.0..1.0), 0.1 * rng.random_range(-1.0..1.0))
        });
        let full = MultiCoilKSpace::new(fft2c(&img).unwrap()).unwrap();
        let mask = random_cartesian_mask((n, n), r, 0.25, seed).unwrap();
        ModelInput {
            kspace: apply_mask(&full, &mask).unwrap(),
            mask,
        }
    }

    fn model_objective<T: Real>(cfg: &ModelConfig, store: &ParamStore<T>, trainable: bool, input: &ModelInput<f64>, target: &Array2<f64>) -> (f64, Option<ParamStore<T>>) {
        let g = Graph::new();
        let p = Bound::new(&g, store, trainable);
        let inp = ModelInput {
            kspace: input.kspace.cast::<T>(),
            mask: input.mask.clone(),
        };
        let out = forward_graph(&p, cfg, &inp).unwrap();
        let tgt = target.mapv(|v| T::lit(v));
        let l = crate::training::loss::loss_graph(&g, &tgt, out.image, 1.0, 1.0).unwrap();
        let v = g.value(l).data()[0].to_f64().unwrap();
        let grads = trainable.then(|| p.gradients(&mut g.backward(l)));
        (v, grads)
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        let cfg = small_config(8, 2, 2);
        let store = init_params::<f64>(&cfg, 12).unwrap();
        let input = toy_input(2, 16, 4.0, 13);
        let target = Array2::from_shape_fn((16, 16), |(y, x)| ((y * 16 + x) % 7) as f64 / 7.0);
        let coords = sample_coordinates(&store, "", 50, 2);
        let fd = finite_differences(&store, &coords, 1e-6, |s| model_objective(&cfg, s, false, &input, &target).0);
        let a64 = gather(&model_objective(&cfg, &store, true, &input, &target).1.unwrap(), &coords);
        let err = relative_error(&a64, &fd);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn rsi_states_are_nonnegative_with_expected_shape() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let mut cin = 2;
        for (i, &f) in cfg.rsi_filters.iter().enumerate() {
            store.add_conv(&format!("rsi.conv{i}"), f, cin, 3, &mut rng);
            cin = f;
        }
        for j in 0..cfg.recurrent_layers {
            store.add_conv(&format!("rsi.out{j}"), cfg.hidden_channels, cin, 1, &mut rng);
        }
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let states = rsi_forward(&p, &cfg, g.constant(rand_tensor(&[1, 2, 12, 10], 3).cast()));
        assert_eq!(states.len(), 4);
        for s in states {
            let v = g.value(s);
            assert_eq!(v.shape(), &[1, 128, 12, 10]);
            assert!(v.data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn default_parameter_count_matches_formula() {
        let cfg = ModelConfig::default();
        let n = init_params::<f32>(&cfg, 0).unwrap().count();
        assert_eq!(n, parameter_count(&cfg));
        // Hand count: SER, RSI, eight units, eight step sizes.
        let ser = ser_param_count(&[8, 16, 32, 64]);
        let rsi = (32 * 2 * 9 + 32) + (32 * 32 * 9 + 32) + (64 * 32 * 9 + 64) + (64 * 64 * 9 + 64) + 4 * (128 * 64 + 128);
        let gru = 3 * (128 * 256 * 9 + 128);
        let unit = (128 * 2 * 25 + 128) + 4 * ((128 * 128 * 9 + 128) + gru) + (2 * 128 * 9 + 2);
        assert_eq!(n, ser + rsi + 8 * unit + 8);
        let shared = ModelConfig {
            share_weights: true,
            ..ModelConfig::default()
        };
        let store = init_params::<f32>(&shared, 0).unwrap();
        assert_eq!(store.count(), ser + rsi + unit + 8);
        assert!(store.get("unit1.conv_in.weight").is_none());
    }

    #[test]
    fn step_sizes_start_at_one() {
        let store = init_params::<f32>(&small_config(4, 1, 3), 0).unwrap();
        for t in 0..3 {
            assert_eq!(store.get(&format!("alpha{t}")).unwrap().data(), &[1.0]);
        }
    }

    #[test]
    fn zero_refinement_is_a_fixed_point() {
        let cfg = ModelConfig {
            zero_refinement: true,
            ..small_config(4, 2, 5)
        };
        let net = RecurrentVarNet::<f64>::new(cfg, 1).unwrap();
        let input = toy_input(3, 16, 4.0, 2);
        let out = net.forward(&input).unwrap();
        assert_eq!(out.kspace.data, input.kspace.data);
    }

    #[test]
    fn zero_step_and_zero_refinement_keep_the_iterate() {
        let cfg = ModelConfig {
            zero_refinement: true,
            use_ser: false,
            ..small_config(4, 1, 1)
        };
        let mut store = init_params::<f64>(&cfg, 0).unwrap();
        store.get_mut("alpha0").unwrap().data_mut()[0] = 0.0;
        let input = toy_input(2, 8, 2.0, 3);
        let maps = estimate_initial_maps(&input.kspace, &input.mask, DEFAULT_EPS).unwrap();
        let y_t = rand_tensor(&[2, 2, 8, 8], 4);
        let g = Graph::new();
        let p = Bound::new(&g, &store, false);
        let mask = Rc::new(input.mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        let h = vec![g.constant(Tensor::zeros(&[1, 4, 8, 8]))];
        let (y, _) = block_step(
            &p,
            "unit0",
            p.param("alpha0"),
            g.constant(y_t.clone()),
            g.constant(Tensor::from_complex(&input.kspace.data)),
            &mask,
            g.constant(Tensor::from_complex(&maps.maps)),
            &h,
        );
        assert_eq!(*g.value(y), y_t);
    }

    #[test]
    fn block_step_matches_operator_composition() {
        let cfg = ModelConfig {
            use_ser: false,
            ..small_config(4, 2, 1)
        };
        let mut store = init_params::<f32>(&cfg, 5).unwrap();
        store.get_mut("alpha0").unwrap().data_mut()[0] = 0.7;
        let input = toy_input(3, 12, 3.0, 6);
        let maps = estimate_initial_maps(&input.kspace.cast::<f32>(), &input.mask, DEFAULT_EPS).unwrap();
        let y0 = input.kspace.cast::<f32>();
        let y_t = rand_tensor(&[3, 2, 12, 12], 7).cast::<f32>();
        let hs = [rand_tensor(&[1, 4, 12, 12], 8), rand_tensor(&[1, 4, 12, 12], 9)];

        let g = Graph::<f32>::new();
        let p = Bound::new(&g, &store, false);
        let mask = Rc::new(input.mask.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect());
        let maps_v = g.constant(Tensor::from_complex(&maps.maps));
        let h: Vec<Var> = hs.iter().map(|t| g.constant(t.cast())).collect();
        let yv = g.constant(y_t.clone());
        let (y_next, _) = block_step(&p, "unit0", p.param("alpha0"), yv, g.constant(Tensor::from_complex(&y0.data)), &mask, maps_v, &h);

        // The same update spelled out with the operator functions.
        let img = g.reduce(g.fft2c(yv, true), maps_v);
        let (w, _) = recurrent_unit_forward(&p, "unit0", img, &h);
        let w = Image::new(g.value(w).to_complex().index_axis(ndarray::Axis(0), 0).to_owned());
        let y = MultiCoilKSpace::new(y_t.to_complex()).unwrap();
        let diff = MultiCoilKSpace::new(&y.data - &y0.data).unwrap();
        let dc = apply_mask(&diff, &input.mask).unwrap();
        let refinement = fft2c(&expand(&w, &maps).unwrap()).unwrap();
        let expected = &y.data - &dc.data.mapv(|z| z * 0.7) + &refinement;
        let got = g.value(y_next).to_complex();
        let worst = got.iter().zip(expected.iter()).map(|(a, b)| (a - b).norm()).fold(0f32, f32::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn full_sampling_with_zero_refinement_returns_reference() {
        let cfg = ModelConfig {
            zero_refinement: true,
            ..small_config(4, 2, 8)
        };
        let net = RecurrentVarNet::<f64>::new(cfg, 0).unwrap();
        let mut input = toy_input(2, 16, 1.0, 1);
        input.mask = SamplingMask::full(16, 16);
        let full = input.kspace.clone();
        let (y, x) = model_forward(&input.kspace, &input.mask, &net).unwrap();
        assert_eq!(y.data, full.data);
        let reference = crate::operators::rss(crate::operators::ifft2c(&full.data).unwrap().view());
        let worst = (&x - &reference).mapv(f64::abs).fold(0.0, |a: f64, &b| a.max(b));
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn any_coil_count_and_deterministic() {
        let net = RecurrentVarNet::<f32>::new(small_config(4, 1, 2), 3).unwrap();
        for nc in [1, 2, 5] {
            let inp = toy_input(nc, 12, 3.0, nc as u64);
            let input = ModelInput {
                kspace: inp.kspace.cast(),
                mask: inp.mask,
            };
            let a = net.forward(&input).unwrap();
            let b = net.forward(&input).unwrap();
            assert_eq!(a.image.dim(), (12, 12));
            assert_eq!(a.image, b.image);
            assert_eq!(a.kspace.data, b.kspace.data);
        }
    }

    #[test]
    fn disabled_initializer_gives_zero_state_and_no_parameters() {
        let cfg = ModelConfig {
            use_rsi: false,
            use_ser: false,
            ..small_config(4, 2, 1)
        };
        let store = init_params::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.count_prefix("rsi."), 0);
        assert_eq!(store.count_prefix("ser."), 0);
        assert_eq!(store.count(), parameter_count(&cfg));
    }
}
