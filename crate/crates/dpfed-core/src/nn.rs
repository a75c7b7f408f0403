//! Dense feed-forward networks with per-example gradients.
//!
//! Plain `Vec<f64>` arithmetic throughout: forward passes, softmax
//! cross-entropy, per-example backprop, SGD steps, and the input gradient of
//! the gradient-matching loss that reconstruction attacks descend on. All
//! functions are pure and allocation-local, so they are safe to call from
//! worker threads.

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NnError {
    /// A non-finite value appeared while differentiating the matching loss.
    #[error("non-finite value at layer {layer} while differentiating the gradient-matching loss")]
    NonFinite { layer: usize },
}

/// Per-layer activation. `SoftmaxOutput` marks the classifier head: `forward`
/// leaves its pre-activations as logits and the loss folds the softmax into
/// cross-entropy. Only valid on the last layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
    SoftmaxOutput,
}

impl Activation {
    /// Elementwise derivative for hidden activations. ReLU uses the
    /// subgradient 0 at exactly 0.
    fn deriv(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::SoftmaxOutput => panic!("softmax head has no elementwise derivative"),
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity | Activation::SoftmaxOutput => z,
        }
    }
}

/// One dense layer. `weights` is row-major `[out_dim][in_dim]`; `bias` has
/// `out_dim` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

/// A stack of dense layers; the last layer must be `SoftmaxOutput`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

/// A labelled example. Features are expected in [0, 1]; `label` indexes the
/// output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Per-layer gradient block, congruent with the owning [`Layer`].
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// A gradient, noise tensor, or update delta congruent with a model's layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradient {
    pub layers: Vec<LayerGrad>,
}

impl ModelParams {
    /// Initializes a network with the given full dimension chain
    /// `[input, hidden..., output]`: hidden layers ReLU, head softmax,
    /// weights and biases uniform in ±1/√fan_in.
    pub fn init(dims: &[usize], rng: &mut impl Rng) -> ModelParams {
        let acts: Vec<Activation> = (0..dims.len() - 1)
            .map(|m| if m == dims.len() - 2 { Activation::SoftmaxOutput } else { Activation::Relu })
            .collect();
        Self::init_with_activations(dims, &acts, rng)
    }

    /// Like [`ModelParams::init`] with explicit activations (tests use
    /// identity hidden layers to sidestep ReLU kinks).
    pub fn init_with_activations(dims: &[usize], acts: &[Activation], rng: &mut impl Rng) -> ModelParams {
        assert!(dims.len() >= 2, "need at least input and output dims");
        assert_eq!(acts.len(), dims.len() - 1);
        assert_eq!(*acts.last().unwrap(), Activation::SoftmaxOutput, "head must be softmax");
        let layers = (0..dims.len() - 1)
            .map(|m| {
                let (fan_in, fan_out) = (dims[m], dims[m + 1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                Layer {
                    weights: (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                    bias: (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                    in_dim: fan_in,
                    out_dim: fan_out,
                    activation: acts[m],
                }
            })
            .collect();
        ModelParams { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }
}

impl Gradient {
    pub fn zeros_like(model: &ModelParams) -> Gradient {
        Gradient {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad { weights: vec![0.0; l.weights.len()], bias: vec![0.0; l.bias.len()] })
                .collect(),
        }
    }

    pub fn congruent_with(&self, model: &ModelParams) -> bool {
        self.layers.len() == model.layers.len()
            && self
                .layers
                .iter()
                .zip(&model.layers)
                .all(|(g, l)| g.weights.len() == l.weights.len() && g.bias.len() == l.bias.len())
    }

    /// self += scale * other
    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            for x in &mut l.weights {
                *x *= s;
            }
            for x in &mut l.bias {
                *x *= s;
            }
        }
    }

    pub fn sq_l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|x| x * x).sum::<f64>() + l.bias.iter().map(|x| x * x).sum::<f64>()
            })
            .sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.sq_l2_norm().sqrt()
    }

    pub fn flat_len(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Coordinates in layer order, weights before bias within a layer.
    pub fn flat_iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    pub fn flat_iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers.iter_mut().flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    /// new_model − old_model, layerwise.
    pub fn between(new: &ModelParams, old: &ModelParams) -> Gradient {
        assert_eq!(new.layers.len(), old.layers.len());
        Gradient {
            layers: new
                .layers
                .iter()
                .zip(&old.layers)
                .map(|(n, o)| LayerGrad {
                    weights: n.weights.iter().zip(&o.weights).map(|(a, b)| a - b).collect(),
                    bias: n.bias.iter().zip(&o.bias).map(|(a, b)| a - b).collect(),
                })
                .collect(),
        }
    }
}

/// Cached forward pass. `pre[m]` holds layer m's pre-activations, `post[m]`
/// its outputs (for the softmax head `post == pre`: logits).
pub struct ForwardTrace {
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &[f64] {
        self.post.last().unwrap()
    }
}

pub fn forward(model: &ModelParams, x: &[f64]) -> ForwardTrace {
    assert_eq!(x.len(), model.input_dim(), "input length mismatch");
    let mut pre = Vec::with_capacity(model.layers.len());
    let mut post = Vec::with_capacity(model.layers.len());
    let mut a: &[f64] = x;
    for layer in &model.layers {
        let mut z = vec![0.0; layer.out_dim];
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = layer.bias[o];
            for (w, ai) in row.iter().zip(a) {
                acc += w * ai;
            }
            *zo = acc;
        }
        let act = z.iter().map(|&v| layer.activation.apply(v)).collect::<Vec<_>>();
        pre.push(z);
        post.push(act);
        a = post.last().unwrap();
    }
    ForwardTrace { pre, post }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax cross-entropy of one example: logsumexp(z) − z[label].
pub fn cross_entropy_loss(model: &ModelParams, ex: &Example) -> f64 {
    let trace = forward(model, &ex.features);
    let logits = trace.logits();
    assert!(ex.label < logits.len(), "label out of range");
    log_sum_exp(logits) - logits[ex.label]
}

pub fn mean_loss(model: &ModelParams, batch: &[Example]) -> f64 {
    batch.iter().map(|e| cross_entropy_loss(model, e)).sum::<f64>() / batch.len() as f64
}

pub fn predict(model: &ModelParams, x: &[f64]) -> usize {
    let trace = forward(model, x);
    trace
        .logits()
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
        .map(|(i, _)| i)
        .unwrap()
}

pub fn accuracy(model: &ModelParams, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples.iter().filter(|e| predict(model, &e.features) == e.label).count();
    hits as f64 / examples.len() as f64
}

/// Backward pass for one example on a cached trace. Returns the per-layer
/// pre-activation adjoints g_m alongside the parameter gradient.
fn backprop(model: &ModelParams, x: &[f64], trace: &ForwardTrace, label: usize) -> (Vec<Vec<f64>>, Gradient) {
    let m_layers = model.layers.len();
    assert_eq!(
        model.layers.last().unwrap().activation,
        Activation::SoftmaxOutput,
        "head must be softmax"
    );
    let mut g: Vec<Vec<f64>> = vec![Vec::new(); m_layers];
    let mut head = softmax(trace.logits());
    head[label] -= 1.0;
    g[m_layers - 1] = head;
    for m in (0..m_layers - 1).rev() {
        let upper = &model.layers[m + 1];
        let gm_next = &g[m + 1];
        let mut gm = vec![0.0; model.layers[m].out_dim];
        for (o, go) in gm_next.iter().enumerate() {
            let row = &upper.weights[o * upper.in_dim..(o + 1) * upper.in_dim];
            for (i, w) in row.iter().enumerate() {
                gm[i] += w * go;
            }
        }
        let act = model.layers[m].activation;
        for (gi, z) in gm.iter_mut().zip(&trace.pre[m]) {
            *gi *= act.deriv(*z);
        }
        g[m] = gm;
    }
    let mut grad = Gradient::zeros_like(model);
    for m in 0..m_layers {
        let a_prev: &[f64] = if m == 0 { x } else { &trace.post[m - 1] };
        let lg = &mut grad.layers[m];
        let in_dim = model.layers[m].in_dim;
        for (o, go) in g[m].iter().enumerate() {
            let row = &mut lg.weights[o * in_dim..(o + 1) * in_dim];
            for (wi, ai) in row.iter_mut().zip(a_prev) {
                *wi = go * ai;
            }
            lg.bias[o] = *go;
        }
    }
    (g, grad)
}

/// Cross-entropy gradient of a single example.
pub fn example_gradient(model: &ModelParams, ex: &Example) -> Gradient {
    let trace = forward(model, &ex.features);
    assert!(ex.label < model.output_dim(), "label out of range");
    backprop(model, &ex.features, &trace, ex.label).1
}

/// One gradient per example, in batch order.
pub fn per_example_gradients(model: &ModelParams, batch: &[Example]) -> Vec<Gradient> {
    batch.iter().map(|e| example_gradient(model, e)).collect()
}

/// Mean of the given gradients, accumulated in index order. Shared by the raw
/// and the sanitized training paths so that disabling clipping and noise
/// reproduces raw training bit for bit.
pub fn average_gradients(grads: &[Gradient]) -> Gradient {
    assert!(!grads.is_empty(), "cannot average zero gradients");
    let mut acc = grads[0].clone();
    for g in &grads[1..] {
        acc.add_scaled(g, 1.0);
    }
    acc.scale(1.0 / grads.len() as f64);
    acc
}

/// Gradient of the mean cross-entropy over the batch.
pub fn batch_gradient(model: &ModelParams, batch: &[Example]) -> Gradient {
    average_gradients(&per_example_gradients(model, batch))
}

/// Pure SGD step: returns `model − eta * grad`, leaving `model` untouched.
pub fn sgd_step(model: &ModelParams, grad: &Gradient, eta: f64) -> ModelParams {
    assert!(grad.congruent_with(model), "gradient shape mismatch");
    let layers = model
        .layers
        .iter()
        .zip(&grad.layers)
        .map(|(l, g)| Layer {
            weights: l.weights.iter().zip(&g.weights).map(|(w, d)| w - eta * d).collect(),
            bias: l.bias.iter().zip(&g.bias).map(|(b, d)| b - eta * d).collect(),
            in_dim: l.in_dim,
            out_dim: l.out_dim,
            activation: l.activation,
        })
        .collect();
    ModelParams { layers }
}

/// model + scale * delta, used by federated aggregation.
pub fn apply_delta(model: &ModelParams, delta: &Gradient, scale: f64) -> ModelParams {
    sgd_step(model, delta, -scale)
}

/// Value and input gradient of the gradient-matching loss
/// ‖∇_W CE(x, label) − target‖²₂ summed over all layers.
#[derive(Clone, Debug)]
pub struct MatchGrad {
    pub loss: f64,
    pub input_grad: Vec<f64>,
}

/// Matching loss alone (no derivative); the finite-difference verification
/// path evaluates this under input perturbations.
pub fn match_loss(model: &ModelParams, x: &[f64], label: usize, target: &Gradient) -> f64 {
    let trace = forward(model, x);
    let (_, grad) = backprop(model, x, &trace, label);
    let mut loss = 0.0;
    for (g, t) in grad.layers.iter().zip(&target.layers) {
        loss += g.weights.iter().zip(&t.weights).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        loss += g.bias.iter().zip(&t.bias).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    loss
}

/// Analytic d/dx of the matching loss by double backprop.
///
/// With z_m = W_m a_{m−1} + b_m, a_m = φ(z_m), head adjoint
/// g_M = softmax(z_M) − e_label, g_m = (W_{m+1}ᵀ g_{m+1}) ⊙ φ′(z_m), the loss
/// depends on x through every (g_m, a_{m−1}) product pair. The reverse sweep
/// below accumulates the adjoints of g (ascending, since g_m feeds g_{m−1})
/// before propagating through the softmax Jacobian and back down the a/z
/// chain. Hidden activations must be piecewise linear (ReLU or identity):
/// their second derivative vanishes, which the sweep relies on.
pub fn input_gradient_of_match_loss(
    model: &ModelParams,
    x: &[f64],
    label: usize,
    target: &Gradient,
) -> Result<MatchGrad, NnError> {
    assert!(target.congruent_with(model), "target shape mismatch");
    let m_layers = model.layers.len();
    let trace = forward(model, x);
    let (g, grad) = backprop(model, x, &trace, label);

    // D_m = 2 (G_m − T_m) and the loss itself.
    let mut loss = 0.0;
    let mut d: Vec<LayerGrad> = Vec::with_capacity(m_layers);
    for (m, (gm, tm)) in grad.layers.iter().zip(&target.layers).enumerate() {
        let dw: Vec<f64> = gm.weights.iter().zip(&tm.weights).map(|(a, b)| 2.0 * (a - b)).collect();
        let db: Vec<f64> = gm.bias.iter().zip(&tm.bias).map(|(a, b)| 2.0 * (a - b)).collect();
        loss += 0.25 * (dw.iter().map(|v| v * v).sum::<f64>() + db.iter().map(|v| v * v).sum::<f64>());
        if !loss.is_finite() {
            return Err(NnError::NonFinite { layer: m });
        }
        d.push(LayerGrad { weights: dw, bias: db });
    }

    // Ascending sweep: ḡ_m = D^W_m a_{m−1} + D^b_m + W_m (ḡ_{m−1} ⊙ φ′(z_{m−1})).
    let mut gbar: Vec<Vec<f64>> = Vec::with_capacity(m_layers);
    for m in 0..m_layers {
        let layer = &model.layers[m];
        let a_prev: &[f64] = if m == 0 { x } else { &trace.post[m - 1] };
        let mut gb = vec![0.0; layer.out_dim];
        for (o, gbo) in gb.iter_mut().enumerate() {
            let row = &d[m].weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let mut acc = d[m].bias[o];
            for (dv, av) in row.iter().zip(a_prev) {
                acc += dv * av;
            }
            *gbo = acc;
        }
        if m > 0 {
            let below_act = model.layers[m - 1].activation;
            let masked: Vec<f64> = gbar[m - 1]
                .iter()
                .zip(&trace.pre[m - 1])
                .map(|(gb, z)| gb * below_act.deriv(*z))
                .collect();
            for (o, gbo) in gb.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                let mut acc = 0.0;
                for (w, mv) in row.iter().zip(&masked) {
                    acc += w * mv;
                }
                *gbo += acc;
            }
        }
        if gb.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer: m });
        }
        gbar.push(gb);
    }

    // Softmax Jacobian at the head: z̄_M = (diag(s) − s sᵀ) ḡ_M.
    let s = softmax(trace.logits());
    let top = &gbar[m_layers - 1];
    let dot: f64 = s.iter().zip(top).map(|(si, gi)| si * gi).sum();
    let mut zbar: Vec<f64> = s.iter().zip(top).map(|(si, gi)| si * (gi - dot)).collect();

    // Descending sweep: ā_{m−1} = (D^W_m)ᵀ g_m + W_mᵀ z̄_m, then mask by φ′.
    let mut xbar = vec![0.0; x.len()];
    for m in (0..m_layers).rev() {
        let layer = &model.layers[m];
        let mut abar = vec![0.0; layer.in_dim];
        for (o, gm_o) in g[m].iter().enumerate() {
            let drow = &d[m].weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let wrow = &layer.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
            let zb = zbar[o];
            for i in 0..layer.in_dim {
                abar[i] += drow[i] * gm_o + wrow[i] * zb;
            }
        }
        if abar.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { layer: m });
        }
        if m == 0 {
            xbar = abar;
        } else {
            let below_act = model.layers[m - 1].activation;
            zbar = abar.iter().zip(&trace.pre[m - 1]).map(|(ab, z)| ab * below_act.deriv(*z)).collect();
        }
    }
    Ok(MatchGrad { loss, input_grad: xbar })
}

/// Central-difference verification path for
/// [`input_gradient_of_match_loss`]; quadratic in the input dimension, meant
/// for small nets.
pub fn input_gradient_of_match_loss_fd(
    model: &ModelParams,
    x: &[f64],
    label: usize,
    target: &Gradient,
    step: f64,
) -> MatchGrad {
    let loss = match_loss(model, x, label, target);
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let up = match_loss(model, &xp, label, target);
        xp[i] = orig - step;
        let down = match_loss(model, &xp, label, target);
        xp[i] = orig;
        grad[i] = (up - down) / (2.0 * step);
    }
    MatchGrad { loss, input_grad: grad }
}
