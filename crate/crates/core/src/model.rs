//! The surrogate model: a pointwise minimum of K quasiconvex components,
//! each the composition of a monotone head with a function convex in `x`.
//!
//! Four component families are supported: parametric quadratics, max-affine,
//! max-squared, and parameter-encoded input-convex networks. Coefficient
//! maps are small MLPs in `p`; with `n_p = 0` they degenerate to free
//! parameters. Inputs are affinely standardized to `[-1, 1]` ranges before
//! entering any network; function values are never rescaled.

use crate::error::{CoreError, CoreResult};
use crate::net::{Activation, DenseLayer, LeafStream, Mlp, TensorMut, TensorRef};
use crate::region::FeasibleRegion;
use crate::tape::{softplus_scalar, Tape, Var};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Input standardization
// ---------------------------------------------------------------------------

/// Affine maps taking raw `x` and `p` into `[-1, 1]` coordinate ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub x_center: Vec<f64>,
    pub x_half: Vec<f64>,
    pub p_center: Vec<f64>,
    pub p_half: Vec<f64>,
}

impl InputScaling {
    pub fn identity(n_x: usize, n_p: usize) -> Self {
        InputScaling {
            x_center: vec![0.0; n_x],
            x_half: vec![1.0; n_x],
            p_center: vec![0.0; n_p],
            p_half: vec![1.0; n_p],
        }
    }

    /// Scaling derived from the decision-variable box; identity on `p`.
    pub fn from_region(region: &FeasibleRegion, n_p: usize) -> Self {
        let (c, h) = center_half(&region.lower, &region.upper);
        InputScaling {
            x_center: c,
            x_half: h,
            p_center: vec![0.0; n_p],
            p_half: vec![1.0; n_p],
        }
    }

    pub fn with_p_box(mut self, lower: &[f64], upper: &[f64]) -> Self {
        let (c, h) = center_half(lower, upper);
        self.p_center = c;
        self.p_half = h;
        self
    }

    pub fn x_std(&self, x: &[f64]) -> Array1<f64> {
        Array1::from_iter(
            x.iter()
                .zip(&self.x_center)
                .zip(&self.x_half)
                .map(|((&x, &c), &h)| (x - c) / h),
        )
    }

    pub fn p_std(&self, p: &[f64]) -> Array1<f64> {
        Array1::from_iter(
            p.iter()
                .zip(&self.p_center)
                .zip(&self.p_half)
                .map(|((&p, &c), &h)| (p - c) / h),
        )
    }
}

fn center_half(lower: &[f64], upper: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let c: Vec<f64> = lower
        .iter()
        .zip(upper)
        .map(|(&l, &u)| 0.5 * (l + u))
        .collect();
    let h: Vec<f64> = lower
        .iter()
        .zip(upper)
        .map(|(&l, &u)| (0.5 * (u - l)).max(1e-12))
        .collect();
    (c, h)
}

// ---------------------------------------------------------------------------
// Hyperstructure descriptors (serializable)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ComponentSpec {
    /// `alpha ||x||^2 + ||L(p) x||^2 + c(p).x + d(p)` with `L` lower-triangular.
    Quadratic { alpha: f64, hidden: Vec<usize> },
    /// `max_t (A_t(p) x + b_t(p))` over scalar affine pieces.
    MaxAffine { pieces: usize, hidden: Vec<usize> },
    /// `sum_t max(A_t(p) x - b_t(p), 0)^2`.
    MaxSquared { pieces: usize, hidden: Vec<usize> },
    /// Input-convex network `l(x, phi(p))` with one context encoder per layer.
    Icnn {
        hidden: Vec<usize>,
        n_q: usize,
        encoder_hidden: Vec<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadSpec {
    Identity,
    /// Feedforward net with nonnegative effective weights, one monotone
    /// activation per hidden layer, linear output.
    MonotoneNet {
        hidden: Vec<usize>,
        activations: Vec<Activation>,
    },
}

/// Full structural description of a surrogate model. Together with a flat
/// parameter vector this determines the model exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_x: usize,
    pub n_p: usize,
    pub k: usize,
    /// Smoothing temperature for the log-sum-exp minimum (training only).
    pub gamma: f64,
    pub shared_head: bool,
    pub components: Vec<ComponentSpec>,
    pub head: HeadSpec,
    pub scaling: InputScaling,
}

impl ModelSpec {
    pub fn validate(&self) -> CoreResult<()> {
        if self.k == 0 {
            return Err(CoreError::ContractViolation("K must be >= 1".into()));
        }
        if self.components.len() != self.k {
            return Err(CoreError::DimensionMismatch {
                what: "component list",
                expected: self.k,
                got: self.components.len(),
            });
        }
        if !(self.gamma > 0.0) {
            return Err(CoreError::ContractViolation(format!(
                "gamma must be > 0, got {}",
                self.gamma
            )));
        }
        for c in &self.components {
            match c {
                ComponentSpec::Quadratic { alpha, .. } => {
                    if *alpha < 0.0 {
                        return Err(CoreError::ContractViolation(
                            "quadratic alpha must be >= 0".into(),
                        ));
                    }
                }
                ComponentSpec::MaxAffine { pieces, .. }
                | ComponentSpec::MaxSquared { pieces, .. } => {
                    if *pieces == 0 {
                        return Err(CoreError::ContractViolation(
                            "piecewise component needs at least one piece".into(),
                        ));
                    }
                }
                ComponentSpec::Icnn { hidden, n_q, .. } => {
                    if hidden.is_empty() || *n_q == 0 {
                        return Err(CoreError::ContractViolation(
                            "icnn needs at least one hidden layer and n_q >= 1".into(),
                        ));
                    }
                }
            }
        }
        if let HeadSpec::MonotoneNet {
            hidden,
            activations,
        } = &self.head
        {
            if hidden.len() != activations.len() {
                return Err(CoreError::DimensionMismatch {
                    what: "head activations",
                    expected: hidden.len(),
                    got: activations.len(),
                });
            }
        }
        if self.scaling.x_center.len() != self.n_x || self.scaling.p_center.len() != self.n_p {
            return Err(CoreError::ContractViolation(
                "scaling dimensions do not match n_x/n_p".into(),
            ));
        }
        Ok(())
    }

    /// Builds a model with freshly initialized parameters. Deterministic in
    /// `seed`.
    pub fn build(&self, seed: u64) -> CoreResult<SurrogateModel> {
        self.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let components: Vec<ConvexComponent> = self
            .components
            .iter()
            .map(|c| ConvexComponent::init(c, self.n_x, self.n_p, &mut rng))
            .collect();
        let build_head = |rng: &mut ChaCha20Rng| match &self.head {
            HeadSpec::Identity => MonotoneHead::Identity,
            HeadSpec::MonotoneNet {
                hidden,
                activations,
            } => {
                let mut layers = Vec::new();
                let mut acts = Vec::new();
                let mut prev = 1usize;
                for (&h, &a) in hidden.iter().zip(activations) {
                    layers.push(DenseLayer::init(prev, h, true, rng));
                    acts.push(a);
                    prev = h;
                }
                layers.push(DenseLayer::init(prev, 1, true, rng));
                acts.push(Activation::Linear);
                MonotoneHead::MonotoneNet(Mlp { layers, acts })
            }
        };
        let heads = if self.shared_head {
            Heads::Shared(build_head(&mut rng))
        } else {
            Heads::PerComponent((0..self.k).map(|_| build_head(&mut rng)).collect())
        };
        Ok(SurrogateModel {
            spec: self.clone(),
            components,
            heads,
        })
    }
}

// ---------------------------------------------------------------------------
// Live components
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct QuadraticComponent {
    pub alpha: f64,
    /// Packed lower-triangular output, row-major: row `i` starts at
    /// `i (i + 1) / 2` and has `i + 1` entries.
    pub l_net: Mlp,
    pub c_net: Mlp,
    pub d_net: Mlp,
    pub n_x: usize,
}

#[derive(Debug, Clone)]
pub struct PiecewiseComponent {
    pub pieces: usize,
    pub squared: bool,
    /// `pieces * n_x` outputs, piece-major.
    pub a_net: Mlp,
    pub b_net: Mlp,
    pub n_x: usize,
}

#[derive(Debug, Clone)]
pub struct IcnnLayer {
    /// Latent value-path weights (`prev_width x width`); effective weights
    /// are `softplus` of these. `None` on the first layer.
    pub wz_latent: Option<Array2<f64>>,
    pub wx: Array2<f64>,
    pub wq: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct IcnnComponent {
    pub layers: Vec<IcnnLayer>,
    /// One context encoder per layer.
    pub encoders: Vec<Mlp>,
    pub n_x: usize,
    pub n_q: usize,
}

#[derive(Debug, Clone)]
pub enum ConvexComponent {
    Quadratic(QuadraticComponent),
    MaxAffine(PiecewiseComponent),
    MaxSquared(PiecewiseComponent),
    Icnn(IcnnComponent),
}

impl ConvexComponent {
    fn init(spec: &ComponentSpec, n_x: usize, n_p: usize, rng: &mut ChaCha20Rng) -> Self {
        let coeff = |out: usize, hidden: &[usize], rng: &mut ChaCha20Rng| {
            Mlp::init(
                n_p,
                hidden,
                out,
                Activation::Softplus,
                Activation::Linear,
                false,
                rng,
            )
        };
        match spec {
            ComponentSpec::Quadratic { alpha, hidden } => {
                ConvexComponent::Quadratic(QuadraticComponent {
                    alpha: *alpha,
                    l_net: coeff(n_x * (n_x + 1) / 2, hidden, rng),
                    c_net: coeff(n_x, hidden, rng),
                    d_net: coeff(1, hidden, rng),
                    n_x,
                })
            }
            ComponentSpec::MaxAffine { pieces, hidden } => {
                ConvexComponent::MaxAffine(PiecewiseComponent {
                    pieces: *pieces,
                    squared: false,
                    a_net: coeff(pieces * n_x, hidden, rng),
                    b_net: coeff(*pieces, hidden, rng),
                    n_x,
                })
            }
            ComponentSpec::MaxSquared { pieces, hidden } => {
                ConvexComponent::MaxSquared(PiecewiseComponent {
                    pieces: *pieces,
                    squared: true,
                    a_net: coeff(pieces * n_x, hidden, rng),
                    b_net: coeff(*pieces, hidden, rng),
                    n_x,
                })
            }
            ComponentSpec::Icnn {
                hidden,
                n_q,
                encoder_hidden,
            } => {
                let mut layers = Vec::new();
                let mut prev = 0usize;
                let widths: Vec<usize> = hidden.iter().copied().chain(std::iter::once(1)).collect();
                for (li, &w) in widths.iter().enumerate() {
                    let glorot = |ind: usize, outd: usize, rng: &mut ChaCha20Rng| {
                        let r = (6.0 / (ind + outd).max(1) as f64).sqrt();
                        Array2::from_shape_fn((ind, outd), |_| rng.random_range(-r..r))
                    };
                    let wz_latent = if li == 0 {
                        None
                    } else {
                        Some(glorot(prev, w, rng))
                    };
                    let wx = glorot(n_x, w, rng);
                    let wq = glorot(*n_q, w, rng);
                    layers.push(IcnnLayer {
                        wz_latent,
                        wx,
                        wq,
                        bias: Array1::zeros(w),
                    });
                    prev = w;
                }
                let encoders = (0..widths.len())
                    .map(|_| {
                        Mlp::init(
                            n_p,
                            encoder_hidden,
                            *n_q,
                            Activation::Softplus,
                            Activation::Tanh,
                            false,
                            rng,
                        )
                    })
                    .collect();
                ConvexComponent::Icnn(IcnnComponent {
                    layers,
                    encoders,
                    n_x,
                    n_q: *n_q,
                })
            }
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a>)) {
        match self {
            ConvexComponent::Quadratic(q) => {
                q.l_net.visit(f);
                q.c_net.visit(f);
                q.d_net.visit(f);
            }
            ConvexComponent::MaxAffine(p) | ConvexComponent::MaxSquared(p) => {
                p.a_net.visit(f);
                p.b_net.visit(f);
            }
            ConvexComponent::Icnn(c) => {
                for l in &c.layers {
                    if let Some(wz) = &l.wz_latent {
                        f(TensorRef::Mat(wz));
                    }
                    f(TensorRef::Mat(&l.wx));
                    f(TensorRef::Mat(&l.wq));
                    f(TensorRef::Vect(&l.bias));
                }
                for e in &c.encoders {
                    e.visit(f);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_>)) {
        match self {
            ConvexComponent::Quadratic(q) => {
                q.l_net.visit_mut(f);
                q.c_net.visit_mut(f);
                q.d_net.visit_mut(f);
            }
            ConvexComponent::MaxAffine(p) | ConvexComponent::MaxSquared(p) => {
                p.a_net.visit_mut(f);
                p.b_net.visit_mut(f);
            }
            ConvexComponent::Icnn(c) => {
                for l in &mut c.layers {
                    if let Some(wz) = &mut l.wz_latent {
                        f(TensorMut::Mat(wz));
                    }
                    f(TensorMut::Mat(&mut l.wx));
                    f(TensorMut::Mat(&mut l.wq));
                    f(TensorMut::Vect(&mut l.bias));
                }
                for e in &mut c.encoders {
                    e.visit_mut(f);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum MonotoneHead {
    Identity,
    MonotoneNet(Mlp),
}

impl MonotoneHead {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            MonotoneHead::Identity => t,
            MonotoneHead::MonotoneNet(mlp) => mlp.eval(&Array1::from(vec![t]))[0],
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a>)) {
        if let MonotoneHead::MonotoneNet(mlp) = self {
            mlp.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_>)) {
        if let MonotoneHead::MonotoneNet(mlp) = self {
            mlp.visit_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub enum Heads {
    Shared(MonotoneHead),
    PerComponent(Vec<MonotoneHead>),
}

impl Heads {
    pub fn get(&self, i: usize) -> &MonotoneHead {
        match self {
            Heads::Shared(h) => h,
            Heads::PerComponent(hs) => &hs[i],
        }
    }
}

// ---------------------------------------------------------------------------
// Component-level evaluation (the four families)
// ---------------------------------------------------------------------------

/// `alpha ||x||^2 + ||L(p) x||^2 + c(p).x + d(p)`.
pub fn eval_quadratic(comp: &QuadraticComponent, x: &[f64], p: &[f64]) -> CoreResult<f64> {
    check_dim("quadratic x", comp.n_x, x.len())?;
    check_dim("quadratic p", comp.l_net.layers[0].in_dim(), p.len())?;
    let pv = Array1::from(p.to_vec());
    let l = comp.l_net.eval(&pv);
    let c = comp.c_net.eval(&pv);
    let d = comp.d_net.eval(&pv)[0];
    let norm2: f64 = x.iter().map(|v| v * v).sum();
    let mut lx2 = 0.0;
    for i in 0..comp.n_x {
        let off = i * (i + 1) / 2;
        let mut row = 0.0;
        for j in 0..=i {
            row += l[off + j] * x[j];
        }
        lx2 += row * row;
    }
    let cx: f64 = c.iter().zip(x).map(|(c, x)| c * x).sum();
    Ok(comp.alpha * norm2 + lx2 + cx + d)
}

/// `max_t (A_t(p) x + b_t(p))`; ties resolve to the lowest piece index.
pub fn eval_max_affine(comp: &PiecewiseComponent, x: &[f64], p: &[f64]) -> CoreResult<f64> {
    piecewise_values(comp, x, p, false).map(|vals| {
        vals.iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    })
}

/// `sum_t max(A_t(p) x - b_t(p), 0)^2`.
pub fn eval_max_squared(comp: &PiecewiseComponent, x: &[f64], p: &[f64]) -> CoreResult<f64> {
    piecewise_values(comp, x, p, true).map(|vals| vals.iter().map(|v| v.max(0.0).powi(2)).sum())
}

fn piecewise_values(
    comp: &PiecewiseComponent,
    x: &[f64],
    p: &[f64],
    squared_sign: bool,
) -> CoreResult<Vec<f64>> {
    if comp.pieces == 0 {
        return Err(CoreError::ContractViolation(
            "piecewise component with zero pieces".into(),
        ));
    }
    check_dim("piecewise x", comp.n_x, x.len())?;
    check_dim("piecewise p", comp.a_net.layers[0].in_dim(), p.len())?;
    let pv = Array1::from(p.to_vec());
    let a = comp.a_net.eval(&pv);
    let b = comp.b_net.eval(&pv);
    Ok((0..comp.pieces)
        .map(|t| {
            let ax: f64 = (0..comp.n_x).map(|j| a[t * comp.n_x + j] * x[j]).sum();
            if squared_sign {
                ax - b[t]
            } else {
                ax + b[t]
            }
        })
        .collect())
}

/// `l(x, phi(p))` with per-layer context inputs and skip connections from `x`.
pub fn eval_icnn(comp: &IcnnComponent, x: &[f64], p: &[f64]) -> CoreResult<f64> {
    check_dim("icnn x", comp.n_x, x.len())?;
    check_dim("icnn p", comp.encoders[0].layers[0].in_dim(), p.len())?;
    let inst = instantiate_icnn(comp, &Array1::from(p.to_vec()));
    Ok(inst.value(&Array1::from(x.to_vec())))
}

/// Applies a monotone head to a scalar.
pub fn eval_head(head: &MonotoneHead, t: f64) -> f64 {
    head.eval(t)
}

fn check_dim(what: &'static str, expected: usize, got: usize) -> CoreResult<()> {
    if expected != got {
        Err(CoreError::DimensionMismatch {
            what,
            expected,
            got,
        })
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Instantiated components: coefficients fixed for one parameter value
// ---------------------------------------------------------------------------

/// A component with its coefficient networks evaluated at a fixed `p`,
/// operating in standardized `x` coordinates. This is the fast path used by
/// the convex subproblem solver.
#[derive(Debug, Clone)]
pub enum ComponentInstance {
    Quadratic {
        alpha: f64,
        l: Array2<f64>,
        c: Array1<f64>,
        d: f64,
    },
    Piecewise {
        squared: bool,
        a: Array2<f64>,
        b: Array1<f64>,
    },
    Icnn(IcnnInstance),
}

#[derive(Debug, Clone)]
pub struct IcnnInstance {
    /// Per layer: effective value weights, skip weights, combined bias
    /// (`bias + wq^T q`), with the output layer last.
    pub layers: Vec<(Option<Array2<f64>>, Array2<f64>, Array1<f64>)>,
}

impl IcnnInstance {
    pub fn value(&self, x: &Array1<f64>) -> f64 {
        self.forward(x).0
    }

    fn forward(&self, x: &Array1<f64>) -> (f64, Vec<Array1<f64>>) {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut z: Option<Array1<f64>> = None;
        for (li, (wz, wx, bias)) in self.layers.iter().enumerate() {
            let mut pre = wx.t().dot(x) + bias;
            if let (Some(wz), Some(zp)) = (wz, &z) {
                pre = pre + wz.t().dot(zp);
            }
            pres.push(pre.clone());
            let is_output = li + 1 == self.layers.len();
            z = Some(if is_output {
                pre
            } else {
                pre.mapv(softplus_scalar)
            });
        }
        (z.unwrap()[0], pres)
    }

    pub fn value_grad(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        let (value, pres) = self.forward(x);
        let n_layers = self.layers.len();
        // delta_l = d out / d pre_l; output layer is linear with width 1.
        let mut delta = Array1::from(vec![1.0]);
        let mut grad = Array1::zeros(x.len());
        for li in (0..n_layers).rev() {
            let (_, wx, _) = &self.layers[li];
            grad = grad + wx.dot(&delta);
            if li > 0 {
                let (wz, _, _) = &self.layers[li];
                let wz = wz.as_ref().expect("non-first icnn layer has wz");
                let back = wz.dot(&delta);
                let sig = pres[li - 1].mapv(crate::tape::sigmoid_scalar);
                delta = back * sig;
            }
        }
        (value, grad)
    }
}

fn instantiate_icnn(comp: &IcnnComponent, p_std: &Array1<f64>) -> IcnnInstance {
    let layers = comp
        .layers
        .iter()
        .zip(&comp.encoders)
        .map(|(l, enc)| {
            let q = enc.eval(p_std);
            let bias = &l.bias + &l.wq.t().dot(&q);
            let wz = l.wz_latent.as_ref().map(|w| w.mapv(softplus_scalar));
            (wz, l.wx.clone(), bias)
        })
        .collect();
    IcnnInstance { layers }
}

impl ComponentInstance {
    pub fn value(&self, x: &Array1<f64>) -> f64 {
        match self {
            ComponentInstance::Quadratic { alpha, l, c, d } => {
                let lx = l.dot(x);
                alpha * x.dot(x) + lx.dot(&lx) + c.dot(x) + d
            }
            ComponentInstance::Piecewise { squared, a, b } => {
                let z = a.dot(x);
                if *squared {
                    z.iter()
                        .zip(b)
                        .map(|(z, b)| (z - b).max(0.0).powi(2))
                        .sum()
                } else {
                    z.iter()
                        .zip(b)
                        .map(|(z, b)| z + b)
                        .fold(f64::NEG_INFINITY, f64::max)
                }
            }
            ComponentInstance::Icnn(inst) => inst.value(x),
        }
    }

    /// Value and (sub)gradient. Max-affine uses the lowest maximizing piece;
    /// the hinge derivative at exactly zero is zero.
    pub fn value_grad(&self, x: &Array1<f64>) -> (f64, Array1<f64>) {
        match self {
            ComponentInstance::Quadratic { alpha, l, c, d } => {
                let lx = l.dot(x);
                let value = alpha * x.dot(x) + lx.dot(&lx) + c.dot(x) + d;
                let grad = x * (2.0 * *alpha) + l.t().dot(&lx) * 2.0 + c;
                (value, grad)
            }
            ComponentInstance::Piecewise { squared, a, b } => {
                let z = a.dot(x);
                if *squared {
                    let mut value = 0.0;
                    let mut grad = Array1::zeros(x.len());
                    for (t, (&zt, &bt)) in z.iter().zip(b).enumerate() {
                        let h = zt - bt;
                        if h > 0.0 {
                            value += h * h;
                            grad = grad + &(a.row(t).to_owned() * (2.0 * h));
                        }
                    }
                    (value, grad)
                } else {
                    let mut best = 0usize;
                    let mut best_v = z[0] + b[0];
                    for t in 1..z.len() {
                        let v = z[t] + b[t];
                        if v > best_v {
                            best_v = v;
                            best = t;
                        }
                    }
                    (best_v, a.row(best).to_owned())
                }
            }
            ComponentInstance::Icnn(inst) => inst.value_grad(x),
        }
    }

    /// Smoothed value/gradient for solving: max-affine replaces its hard
    /// max by a log-sum-exp at temperature `gamma_pieces`, which upper-bounds
    /// the exact value by at most `gamma_pieces * ln(pieces)` and makes the
    /// stationarity residual well defined at kinks. Other families are
    /// already differentiable and fall through to the exact path.
    pub fn value_grad_smoothed(&self, x: &Array1<f64>, gamma_pieces: f64) -> (f64, Array1<f64>) {
        match self {
            ComponentInstance::Piecewise {
                squared: false,
                a,
                b,
            } => {
                let z = a.dot(x) + b;
                let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let w: Vec<f64> = z.iter().map(|&v| ((v - m) / gamma_pieces).exp()).collect();
                let s: f64 = w.iter().sum();
                let value = m + gamma_pieces * s.ln();
                let mut grad = Array1::zeros(x.len());
                for (t, wt) in w.iter().enumerate() {
                    grad = grad + &(a.row(t).to_owned() * (wt / s));
                }
                (value, grad)
            }
            _ => self.value_grad(x),
        }
    }

    pub fn is_max_affine(&self) -> bool {
        matches!(
            self,
            ComponentInstance::Piecewise { squared: false, .. }
        )
    }
}

// ---------------------------------------------------------------------------
// The surrogate model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub spec: ModelSpec,
    pub components: Vec<ConvexComponent>,
    pub heads: Heads,
}

impl SurrogateModel {
    pub fn k(&self) -> usize {
        self.spec.k
    }

    pub fn n_x(&self) -> usize {
        self.spec.n_x
    }

    pub fn n_p(&self) -> usize {
        self.spec.n_p
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(TensorRef<'a>)) {
        for c in &self.components {
            c.visit(f);
        }
        match &self.heads {
            Heads::Shared(h) => h.visit(f),
            Heads::PerComponent(hs) => {
                for h in hs {
                    h.visit(f);
                }
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(TensorMut<'_>)) {
        for c in &mut self.components {
            c.visit_mut(f);
        }
        match &mut self.heads {
            Heads::Shared(h) => h.visit_mut(f),
            Heads::PerComponent(hs) => {
                for h in hs {
                    h.visit_mut(f);
                }
            }
        }
    }

    pub fn theta_len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |t| n += t.len());
        n
    }

    /// Flattens all parameters into the canonical theta vector.
    pub fn theta(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.theta_len());
        self.visit(&mut |t| match t {
            TensorRef::Mat(m) => out.extend(m.iter()),
            TensorRef::Vect(v) => out.extend(v.iter()),
        });
        Array1::from(out)
    }

    /// Scatters a flat theta back into the parameter tensors.
    pub fn set_theta(&mut self, theta: &Array1<f64>) -> CoreResult<()> {
        let expected = self.theta_len();
        if theta.len() != expected {
            return Err(CoreError::ThetaLength {
                expected,
                got: theta.len(),
            });
        }
        let mut pos = 0usize;
        self.visit_mut(&mut |t| match t {
            TensorMut::Mat(m) => {
                for x in m.iter_mut() {
                    *x = theta[pos];
                    pos += 1;
                }
            }
            TensorMut::Vect(v) => {
                for x in v.iter_mut() {
                    *x = theta[pos];
                    pos += 1;
                }
            }
        });
        Ok(())
    }

    /// Coefficients of component `i` fixed at `p`, in standardized `x`
    /// coordinates.
    pub fn instantiate(&self, i: usize, p: &[f64]) -> CoreResult<ComponentInstance> {
        check_dim("model p", self.n_p(), p.len())?;
        let p_std = self.spec.scaling.p_std(p);
        Ok(match &self.components[i] {
            ConvexComponent::Quadratic(q) => {
                let lp = q.l_net.eval(&p_std);
                let mut l = Array2::zeros((q.n_x, q.n_x));
                for r in 0..q.n_x {
                    let off = r * (r + 1) / 2;
                    for c in 0..=r {
                        l[[r, c]] = lp[off + c];
                    }
                }
                ComponentInstance::Quadratic {
                    alpha: q.alpha,
                    l,
                    c: q.c_net.eval(&p_std),
                    d: q.d_net.eval(&p_std)[0],
                }
            }
            ConvexComponent::MaxAffine(pc) | ConvexComponent::MaxSquared(pc) => {
                let av = pc.a_net.eval(&p_std);
                let a = Array2::from_shape_fn((pc.pieces, pc.n_x), |(t, j)| av[t * pc.n_x + j]);
                ComponentInstance::Piecewise {
                    squared: pc.squared,
                    a,
                    b: pc.b_net.eval(&p_std),
                }
            }
            ConvexComponent::Icnn(c) => ComponentInstance::Icnn(instantiate_icnn(c, &p_std)),
        })
    }

    /// Raw-coordinate component evaluation `f_bar_i(x, p)`.
    pub fn component_value(&self, i: usize, x: &[f64], p: &[f64]) -> CoreResult<f64> {
        check_dim("model x", self.n_x(), x.len())?;
        let inst = self.instantiate(i, p)?;
        Ok(inst.value(&self.spec.scaling.x_std(x)))
    }

    /// Head-transformed component values `z_i = h_i(f_bar_i(x, p))`.
    pub fn head_values(&self, x: &[f64], p: &[f64]) -> CoreResult<Vec<f64>> {
        check_dim("model x", self.n_x(), x.len())?;
        let x_std = self.spec.scaling.x_std(x);
        (0..self.k())
            .map(|i| {
                let inst = self.instantiate(i, p)?;
                Ok(self.heads.get(i).eval(inst.value(&x_std)))
            })
            .collect()
    }

    /// Exact surrogate value `min_i h_i(f_bar_i(x, p))` and the lowest
    /// minimizing index.
    pub fn exact(&self, x: &[f64], p: &[f64]) -> CoreResult<(f64, usize)> {
        let z = self.head_values(x, p)?;
        let mut best = 0usize;
        for i in 1..z.len() {
            if z[i] < z[best] {
                best = i;
            }
        }
        Ok((z[best], best))
    }

    /// Smoothed surrogate `-gamma * lse(-z / gamma)`.
    pub fn smoothed(&self, x: &[f64], p: &[f64]) -> CoreResult<f64> {
        let z = self.head_values(x, p)?;
        Ok(smoothed_min(&z, self.gamma()))
    }

    /// Smoothed value together with the softmin weights
    /// `w_i = softmax(-z / gamma)`.
    pub fn smoothed_with_weights(&self, x: &[f64], p: &[f64]) -> CoreResult<(f64, Vec<f64>)> {
        let z = self.head_values(x, p)?;
        let gamma = self.gamma();
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        let e: Vec<f64> = z.iter().map(|&v| (-(v - min) / gamma).exp()).collect();
        let s: f64 = e.iter().sum();
        Ok((min - gamma * s.ln(), e.iter().map(|v| v / s).collect()))
    }

    /// Exact gradient of the smoothed surrogate with respect to raw `x`,
    /// computed on the tape.
    pub fn grad_x_smoothed(&self, x: &[f64], p: &[f64]) -> CoreResult<Vec<f64>> {
        check_dim("model x", self.n_x(), x.len())?;
        check_dim("model p", self.n_p(), p.len())?;
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let xv = tape.param(Array1::from(x.to_vec()).insert_axis(Axis(0)));
        let pv = tape.constant(Array1::from(p.to_vec()).insert_axis(Axis(0)));
        let fwd = bound.forward(&tape, xv, pv);
        let root = tape.sum_all(fwd.smoothed);
        let g = tape.backward(root, &[xv])[0];
        Ok(tape.value(g).row(0).to_vec())
    }

    /// Creates parameter leaves on a tape; forward passes can then be run
    /// any number of times against the same binding.
    pub fn bind<'m>(&'m self, tape: &Tape) -> BoundModel<'m> {
        let comp_leaves = self
            .components
            .iter()
            .map(|c| {
                let mut leaves = Vec::new();
                c.visit(&mut |t| leaves.push(tape.param(t.as_matrix())));
                leaves
            })
            .collect();
        let head_leaves = match &self.heads {
            Heads::Shared(h) => {
                let mut leaves = Vec::new();
                h.visit(&mut |t| leaves.push(tape.param(t.as_matrix())));
                vec![leaves]
            }
            Heads::PerComponent(hs) => hs
                .iter()
                .map(|h| {
                    let mut leaves = Vec::new();
                    h.visit(&mut |t| leaves.push(tape.param(t.as_matrix())));
                    leaves
                })
                .collect(),
        };
        BoundModel {
            model: self,
            comp_leaves,
            head_leaves,
        }
    }
}

/// `-gamma * log sum exp(-z / gamma)`, max-shifted. Underflow of the
/// shifted exponentials to zero is acceptable.
pub fn smoothed_min(z: &[f64], gamma: f64) -> f64 {
    assert!(gamma > 0.0, "smoothed_min: gamma must be positive");
    let min = z.iter().copied().fold(f64::INFINITY, f64::min);
    let s: f64 = z.iter().map(|&v| (-(v - min) / gamma).exp()).sum();
    min - gamma * s.ln()
}

/// Exact pointwise minimum with lowest-index tie-breaking.
pub fn exact_min(z: &[f64]) -> (f64, usize) {
    let mut best = 0usize;
    for i in 1..z.len() {
        if z[i] < z[best] {
            best = i;
        }
    }
    (z[best], best)
}

// ---------------------------------------------------------------------------
// Tape forward pass
// ---------------------------------------------------------------------------

/// A model bound to a tape: parameter leaves created once, in theta order.
pub struct BoundModel<'m> {
    model: &'m SurrogateModel,
    comp_leaves: Vec<Vec<Var>>,
    head_leaves: Vec<Vec<Var>>,
}

/// Outputs of a batched surrogate forward pass.
pub struct ForwardOut {
    /// Head-transformed component values, `N x K`.
    pub z: Var,
    /// Smoothed surrogate values, `N x 1`.
    pub smoothed: Var,
}

impl BoundModel<'_> {
    /// All parameter leaves in canonical theta order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut all: Vec<Var> = self.comp_leaves.iter().flatten().copied().collect();
        all.extend(self.head_leaves.iter().flatten().copied());
        all
    }

    /// Flattens per-leaf gradient nodes (aligned with `param_vars`) into a
    /// gradient vector in theta order.
    pub fn flatten_grads(&self, tape: &Tape, grads: &[Var]) -> Array1<f64> {
        let mut out = Vec::new();
        for g in grads {
            out.extend(tape.value(*g).iter().copied());
        }
        Array1::from(out)
    }

    /// Batched forward pass from raw inputs (`x`: N x n_x, `p`: N x n_p).
    pub fn forward(&self, tape: &Tape, x: Var, p: Var) -> ForwardOut {
        let model = self.model;
        let scaling = &model.spec.scaling;
        let x_std = standardize_tape(tape, x, &scaling.x_center, &scaling.x_half);
        let p_std = if model.n_p() > 0 {
            standardize_tape(tape, p, &scaling.p_center, &scaling.p_half)
        } else {
            p
        };

        let mut cols = Vec::with_capacity(model.k());
        for (i, comp) in model.components.iter().enumerate() {
            let mut stream = LeafStream::new(&self.comp_leaves[i]);
            let value = component_forward(tape, comp, x_std, p_std, &mut stream);
            debug_assert!(stream.exhausted(), "component {i} leaf count mismatch");
            let head_idx = match &model.heads {
                Heads::Shared(_) => 0,
                Heads::PerComponent(_) => i,
            };
            let mut hstream = LeafStream::new(&self.head_leaves[head_idx]);
            let z = head_forward(tape, model.heads.get(i), value, &mut hstream);
            cols.push(z);
        }
        let z = tape.hstack(&cols);
        let gamma = model.gamma();
        let neg = tape.scale(z, -1.0 / gamma);
        let smoothed = tape.scale(tape.lse_rows(neg), -gamma);
        ForwardOut { z, smoothed }
    }
}

fn standardize_tape(tape: &Tape, v: Var, center: &[f64], half: &[f64]) -> Var {
    let c = tape.constant(Array1::from(center.to_vec()).insert_axis(Axis(0)));
    let inv = tape.constant(
        Array1::from_iter(half.iter().map(|h| 1.0 / h)).insert_axis(Axis(0)),
    );
    tape.mul_rows(tape.sub(v, c), inv)
}

fn component_forward(
    tape: &Tape,
    comp: &ConvexComponent,
    x_std: Var,
    p_std: Var,
    leaves: &mut LeafStream,
) -> Var {
    match comp {
        ConvexComponent::Quadratic(q) => {
            let lp = q.l_net.forward_tape(tape, p_std, leaves);
            let c = q.c_net.forward_tape(tape, p_std, leaves);
            let d = q.d_net.forward_tape(tape, p_std, leaves);
            let norm2 = tape.sum_rows(tape.square(x_std));
            let mut total = tape.scale(norm2, q.alpha);
            for i in 0..q.n_x {
                let off = i * (i + 1) / 2;
                let li = tape.slice_cols(lp, off, i + 1);
                let xi = tape.slice_cols(x_std, 0, i + 1);
                let row = tape.sum_rows(tape.mul(li, xi));
                total = tape.add(total, tape.square(row));
            }
            let cx = tape.sum_rows(tape.mul(c, x_std));
            tape.add(tape.add(total, cx), d)
        }
        ConvexComponent::MaxAffine(pc) => {
            let z = piecewise_forward(tape, pc, x_std, p_std, leaves);
            tape.row_max(z)
        }
        ConvexComponent::MaxSquared(pc) => {
            let z = piecewise_forward(tape, pc, x_std, p_std, leaves);
            let h = tape.relu(z);
            tape.sum_rows(tape.square(h))
        }
        ConvexComponent::Icnn(c) => {
            let mut qs = Vec::with_capacity(c.encoders.len());
            // Layer tensors come first in visitation order, then encoders;
            // run encoders on a split stream to keep leaf order canonical.
            let mut layer_vars: Vec<(Option<Var>, Var, Var, Var)> = Vec::new();
            for l in &c.layers {
                let wz = l.wz_latent.as_ref().map(|_| leaves.next());
                let wx = leaves.next();
                let wq = leaves.next();
                let bias = leaves.next();
                layer_vars.push((wz, wx, wq, bias));
            }
            for e in &c.encoders {
                qs.push(e.forward_tape(tape, p_std, leaves));
            }
            let mut z: Option<Var> = None;
            let n_layers = c.layers.len();
            for (li, (wz, wx, wq, bias)) in layer_vars.into_iter().enumerate() {
                let mut pre = tape.add(
                    tape.add(tape.matmul(x_std, wx), tape.matmul(qs[li], wq)),
                    bias,
                );
                if let (Some(wz), Some(zp)) = (wz, z) {
                    let wz_eff = tape.softplus(wz);
                    pre = tape.add(pre, tape.matmul(zp, wz_eff));
                }
                let is_output = li + 1 == n_layers;
                z = Some(if is_output { pre } else { tape.softplus(pre) });
            }
            z.expect("icnn has at least one layer")
        }
    }
}

fn piecewise_forward(
    tape: &Tape,
    pc: &PiecewiseComponent,
    x_std: Var,
    p_std: Var,
    leaves: &mut LeafStream,
) -> Var {
    let a = pc.a_net.forward_tape(tape, p_std, leaves);
    let b = pc.b_net.forward_tape(tape, p_std, leaves);
    let mut piece_vals = Vec::with_capacity(pc.pieces);
    for t in 0..pc.pieces {
        let at = tape.slice_cols(a, t * pc.n_x, pc.n_x);
        piece_vals.push(tape.sum_rows(tape.mul(at, x_std)));
    }
    let ax = tape.hstack(&piece_vals);
    if pc.squared {
        tape.sub(ax, b)
    } else {
        tape.add(ax, b)
    }
}

fn head_forward(tape: &Tape, head: &MonotoneHead, value: Var, leaves: &mut LeafStream) -> Var {
    match head {
        MonotoneHead::Identity => value,
        MonotoneHead::MonotoneNet(mlp) => mlp.forward_tape(tape, value, leaves),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_net(values: &[f64]) -> Mlp {
        // Zero-input net whose bias is the constant output.
        Mlp {
            layers: vec![DenseLayer {
                weight: Array2::zeros((0, values.len())),
                bias: Array1::from(values.to_vec()),
                nonneg: false,
            }],
            acts: vec![Activation::Linear],
        }
    }

    fn quad_free(n_x: usize, alpha: f64, l: &[f64], c: &[f64], d: f64) -> QuadraticComponent {
        QuadraticComponent {
            alpha,
            l_net: const_net(l),
            c_net: const_net(c),
            d_net: const_net(&[d]),
            n_x,
        }
    }

    #[test]
    fn quadratic_reduces_to_norm_squared() {
        // L = 0, c = 0, d = 0, alpha = 1, x = (3, 4) -> 25
        let comp = quad_free(2, 1.0, &[0.0, 0.0, 0.0], &[0.0, 0.0], 0.0);
        let v = eval_quadratic(&comp, &[3.0, 4.0], &[]).unwrap();
        assert_eq!(v, 25.0);
    }

    #[test]
    fn quadratic_identity_factor() {
        // alpha = 0, L = I, x = (1, 2) -> 5
        let comp = quad_free(2, 0.0, &[1.0, 0.0, 1.0], &[0.0, 0.0], 0.0);
        let v = eval_quadratic(&comp, &[1.0, 2.0], &[]).unwrap();
        assert_eq!(v, 5.0);
    }

    #[test]
    fn quadratic_matches_dense_matrix_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = 3usize;
            let packed: Vec<f64> = (0..n * (n + 1) / 2)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let c: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d = rng.random_range(-2.0..2.0);
            let alpha = rng.random_range(0.0..1.5);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let comp = quad_free(n, alpha, &packed, &c, d);
            let got = eval_quadratic(&comp, &x, &[]).unwrap();

            // Oracle: dense matrix arithmetic.
            let mut l = Array2::zeros((n, n));
            for r in 0..n {
                for cc in 0..=r {
                    l[[r, cc]] = packed[r * (r + 1) / 2 + cc];
                }
            }
            let xv = Array1::from(x.clone());
            let lx = l.dot(&xv);
            let want = alpha * xv.dot(&xv)
                + lx.dot(&lx)
                + Array1::from(c.clone()).dot(&xv)
                + d;
            assert!((got - want).abs() < 1e-12);
        }
    }

    fn pieces_free(n_x: usize, squared: bool, a: &[f64], b: &[f64]) -> PiecewiseComponent {
        PiecewiseComponent {
            pieces: b.len(),
            squared,
            a_net: const_net(a),
            b_net: const_net(b),
            n_x,
        }
    }

    #[test]
    fn max_affine_single_piece_and_abs() {
        let comp = pieces_free(2, false, &[1.0, 0.0], &[0.0]);
        assert_eq!(eval_max_affine(&comp, &[2.0, 5.0], &[]).unwrap(), 2.0);

        let abs = pieces_free(2, false, &[1.0, 0.0, -1.0, 0.0], &[0.0, 0.0]);
        assert!((eval_max_affine(&abs, &[0.3, 7.0], &[]).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn max_affine_matches_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 3;
        let pieces = 10;
        let a: Vec<f64> = (0..pieces * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..pieces).map(|_| rng.random_range(-1.0..1.0)).collect();
        let comp = pieces_free(n, false, &a, &b);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = eval_max_affine(&comp, &x, &[]).unwrap();
            let mut want = f64::NEG_INFINITY;
            for t in 0..pieces {
                let v: f64 = (0..n).map(|j| a[t * n + j] * x[j]).sum::<f64>() + b[t];
                want = want.max(v);
            }
            assert_eq!(got, want);
        }
    }

    #[test]
    fn max_squared_inactive_and_single_hinge() {
        let comp = pieces_free(1, true, &[1.0, -2.0], &[1e6, 1e6]);
        assert_eq!(eval_max_squared(&comp, &[3.0], &[]).unwrap(), 0.0);

        let one = pieces_free(1, true, &[1.0], &[0.0]);
        assert_eq!(eval_max_squared(&one, &[2.0], &[]).unwrap(), 4.0);
    }

    #[test]
    fn max_squared_matches_term_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 2;
        let pieces = 10;
        let a: Vec<f64> = (0..pieces * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..pieces).map(|_| rng.random_range(-0.5..0.5)).collect();
        let comp = pieces_free(n, true, &a, &b);
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let got = eval_max_squared(&comp, &x, &[]).unwrap();
            let mut want = 0.0;
            for t in 0..pieces {
                let v: f64 = (0..n).map(|j| a[t * n + j] * x[j]).sum::<f64>() - b[t];
                want += v.max(0.0).powi(2);
            }
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_pieces_is_contract_violation() {
        let comp = PiecewiseComponent {
            pieces: 0,
            squared: false,
            a_net: const_net(&[]),
            b_net: const_net(&[]),
            n_x: 1,
        };
        assert!(eval_max_affine(&comp, &[0.0], &[]).is_err());
    }

    fn tiny_icnn() -> IcnnComponent {
        // 1 hidden layer of width 2, n_x = 2, n_q = 1, hand-set weights.
        let l0 = IcnnLayer {
            wz_latent: None,
            wx: ndarray::array![[0.5, -0.3], [0.2, 0.7]],
            wq: ndarray::array![[0.1, -0.2]],
            bias: Array1::from(vec![0.05, -0.1]),
        };
        let out = IcnnLayer {
            wz_latent: Some(ndarray::array![[0.4], [-0.6]]),
            wx: ndarray::array![[0.3], [-0.1]],
            wq: ndarray::array![[0.25]],
            bias: Array1::from(vec![0.15]),
        };
        IcnnComponent {
            layers: vec![l0, out],
            encoders: vec![const_net(&[0.8]), const_net(&[-0.5])],
            n_x: 2,
            n_q: 1,
        }
    }

    #[test]
    fn icnn_matches_hand_unrolled_forward() {
        let comp = tiny_icnn();
        let x = [1.0, 0.0];
        let got = eval_icnn(&comp, &x, &[]).unwrap();

        // Hand-unrolled arithmetic.
        let q0: f64 = 0.8;
        let q1: f64 = -0.5;
        let pre0: f64 = 0.5 * 1.0 + 0.2 * 0.0 + 0.1 * q0 + 0.05;
        let pre1: f64 = -0.3 * 1.0 + 0.7 * 0.0 + (-0.2) * q0 + (-0.1);
        let z0 = (1.0 + pre0.exp()).ln();
        let z1 = (1.0 + pre1.exp()).ln();
        let wz0 = (1.0 + 0.4f64.exp()).ln();
        let wz1 = (1.0 + (-0.6f64).exp()).ln();
        let want = wz0 * z0 + wz1 * z1 + 0.3 * 1.0 + (-0.1) * 0.0 + 0.25 * q1 + 0.15;
        assert!((got - want).abs() < 1e-12, "got {got} want {want}");
    }

    #[test]
    fn icnn_with_vanishing_weights_is_constant() {
        // Latent value weights at -40 make the effective softplus weights
        // ~4e-18; with zero skip weights the output is the final bias up to
        // that dust.
        let l0 = IcnnLayer {
            wz_latent: None,
            wx: Array2::zeros((2, 2)),
            wq: Array2::zeros((1, 2)),
            bias: Array1::zeros(2),
        };
        let out = IcnnLayer {
            wz_latent: Some(Array2::from_elem((2, 1), -40.0)),
            wx: Array2::zeros((2, 1)),
            wq: Array2::zeros((1, 1)),
            bias: Array1::from(vec![0.7]),
        };
        let comp = IcnnComponent {
            layers: vec![l0, out],
            encoders: vec![const_net(&[0.0]), const_net(&[0.0])],
            n_x: 2,
            n_q: 1,
        };
        let v1 = eval_icnn(&comp, &[5.0, -3.0], &[]).unwrap();
        let v2 = eval_icnn(&comp, &[-1.0, 2.0], &[]).unwrap();
        assert!((v1 - 0.7).abs() < 1e-12);
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn icnn_segment_convexity() {
        let spec = ModelSpec {
            n_x: 2,
            n_p: 3,
            k: 1,
            gamma: 0.1,
            shared_head: true,
            components: vec![ComponentSpec::Icnn {
                hidden: vec![4, 4],
                n_q: 3,
                encoder_hidden: vec![4],
            }],
            head: HeadSpec::Identity,
            scaling: InputScaling::identity(2, 3),
        };
        let model = spec.build(3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(100);
        for _ in 0..1000 {
            let p: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lam: f64 = rng.random_range(0.0..1.0);
            let mid: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
                .collect();
            let fx = model.component_value(0, &x, &p).unwrap();
            let fy = model.component_value(0, &y, &p).unwrap();
            let fm = model.component_value(0, &mid, &p).unwrap();
            assert!(fm <= lam * fx + (1.0 - lam) * fy + 1e-9);
        }
    }

    #[test]
    fn head_identity_and_vanishing_latents() {
        assert_eq!(eval_head(&MonotoneHead::Identity, -1.03), -1.03);

        // Latent weights at -40: effective weights ~4e-18, so the net is a
        // bias chain and h(0) = h(5) up to that dust.
        let mlp = Mlp {
            layers: vec![
                DenseLayer {
                    weight: Array2::from_elem((1, 3), -40.0),
                    bias: Array1::from(vec![0.3, -0.2, 0.1]),
                    nonneg: true,
                },
                DenseLayer {
                    weight: Array2::from_elem((3, 1), -40.0),
                    bias: Array1::from(vec![0.9]),
                    nonneg: true,
                },
            ],
            acts: vec![Activation::Tanh, Activation::Linear],
        };
        let h = MonotoneHead::MonotoneNet(mlp);
        assert!((eval_head(&h, 0.0) - eval_head(&h, 5.0)).abs() < 1e-12);
    }

    #[test]
    fn head_monotonicity_on_random_net() {
        let spec = HeadSpec::MonotoneNet {
            hidden: vec![5, 3],
            activations: vec![Activation::Tanh, Activation::Softplus],
        };
        let model = ModelSpec {
            n_x: 1,
            n_p: 0,
            k: 1,
            gamma: 0.1,
            shared_head: true,
            components: vec![ComponentSpec::Quadratic {
                alpha: 1.0,
                hidden: vec![],
            }],
            head: spec,
            scaling: InputScaling::identity(1, 0),
        }
        .build(42)
        .unwrap();
        let head = model.heads.get(0);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-10.0..10.0);
            let b: f64 = rng.random_range(-10.0..10.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(head.eval(lo) <= head.eval(hi) + 1e-12);
        }
    }

    #[test]
    fn exact_min_examples() {
        // K = 2 constant components 3 and 5 under identity heads.
        let spec = ModelSpec {
            n_x: 1,
            n_p: 0,
            k: 2,
            gamma: 0.5,
            shared_head: false,
            components: vec![
                ComponentSpec::MaxAffine {
                    pieces: 1,
                    hidden: vec![],
                },
                ComponentSpec::MaxAffine {
                    pieces: 1,
                    hidden: vec![],
                },
            ],
            head: HeadSpec::Identity,
            scaling: InputScaling::identity(1, 0),
        };
        let mut model = spec.build(0).unwrap();
        // Overwrite free parameters: piece value = a*x + b with a = 0.
        let mut theta = model.theta();
        theta.fill(0.0);
        model.set_theta(&theta).unwrap();
        if let ConvexComponent::MaxAffine(pc) = &mut model.components[0] {
            pc.b_net.layers[0].bias[0] = 3.0;
        }
        if let ConvexComponent::MaxAffine(pc) = &mut model.components[1] {
            pc.b_net.layers[0].bias[0] = 5.0;
        }
        // a-nets must be zero so the value is constant.
        if let ConvexComponent::MaxAffine(pc) = &mut model.components[0] {
            pc.a_net.layers[0].bias.fill(0.0);
        }
        let (v, i) = model.exact(&[0.3], &[]).unwrap();
        assert_eq!((v, i), (3.0, 0));
    }

    #[test]
    fn exact_min_matches_loop_oracle_on_random_model() {
        let spec = ModelSpec {
            n_x: 2,
            n_p: 2,
            k: 5,
            gamma: 0.3,
            shared_head: false,
            components: (0..5)
                .map(|i| {
                    if i % 2 == 0 {
                        ComponentSpec::MaxSquared {
                            pieces: 4,
                            hidden: vec![3],
                        }
                    } else {
                        ComponentSpec::Quadratic {
                            alpha: 0.5,
                            hidden: vec![3],
                        }
                    }
                })
                .collect(),
            head: HeadSpec::MonotoneNet {
                hidden: vec![4],
                activations: vec![Activation::Softplus],
            },
            scaling: InputScaling::identity(2, 2),
        };
        let model = spec.build(9).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..100 {
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (v, idx) = model.exact(&x, &p).unwrap();
            let z = model.head_values(&x, &p).unwrap();
            let mut want = f64::INFINITY;
            let mut want_i = 0;
            for (i, &zi) in z.iter().enumerate() {
                if zi < want {
                    want = zi;
                    want_i = i;
                }
            }
            assert_eq!(idx, want_i);
            assert_eq!(v, want);
        }
    }

    #[test]
    fn smoothed_equal_entries_and_direct_formula() {
        // Equal values a: smoothed = a - gamma ln 2.
        let z = [1.7, 1.7];
        let got = smoothed_min(&z, 0.25);
        assert!((got - (1.7 - 0.25 * 2.0f64.ln())).abs() < 1e-14);

        // K = 3, values (0, 1, 2), gamma = 1 -> -log(1 + e^-1 + e^-2).
        let z = [0.0, 1.0, 2.0];
        let got = smoothed_min(&z, 1.0);
        let want = -((1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln());
        assert!((got - want).abs() < 1e-14);
    }

    #[test]
    fn lse_sandwich_and_small_gamma() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let k = rng.random_range(1..6);
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-50.0..50.0)).collect();
            let gamma: f64 = rng.random_range(1e-4..2.0);
            let sm = smoothed_min(&z, gamma);
            let (mn, _) = exact_min(&z);
            assert!(sm <= mn + 1e-12);
            assert!(sm >= mn - gamma * (k as f64).ln() - 1e-12);
        }
    }

    #[test]
    fn smoothed_converges_monotonically_as_gamma_halves() {
        let mut rng = ChaCha20Rng::seed_from_u64(37);
        for _ in 0..100 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (mn, _) = exact_min(&z);
            let mut gamma = 1.0;
            let mut prev_gap = f64::INFINITY;
            while gamma >= 1.0 / 1024.0 {
                let gap = (smoothed_min(&z, gamma) - mn).abs();
                assert!(gap <= prev_gap + 1e-15);
                prev_gap = gap;
                gamma *= 0.5;
            }
        }
    }

    #[test]
    fn theta_round_trip_is_bitwise() {
        let spec = ModelSpec {
            n_x: 3,
            n_p: 2,
            k: 2,
            gamma: 0.1,
            shared_head: true,
            components: vec![
                ComponentSpec::Icnn {
                    hidden: vec![4],
                    n_q: 2,
                    encoder_hidden: vec![3],
                },
                ComponentSpec::Quadratic {
                    alpha: 0.2,
                    hidden: vec![3],
                },
            ],
            head: HeadSpec::MonotoneNet {
                hidden: vec![5, 3],
                activations: vec![Activation::Tanh, Activation::Tanh],
            },
            scaling: InputScaling::identity(3, 2),
        };
        let mut model = spec.build(77).unwrap();
        let theta = model.theta();
        assert!(theta.len() > 0);
        model.set_theta(&theta).unwrap();
        let theta2 = model.theta();
        assert_eq!(theta.len(), theta2.len());
        for (a, b) in theta.iter().zip(theta2.iter()) {
            assert!(a.to_bits() == b.to_bits());
        }

        // Wrong length rejected.
        let bad = Array1::zeros(theta.len() + 1);
        assert!(model.set_theta(&bad).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_evaluation() {
        let spec = ModelSpec {
            n_x: 2,
            n_p: 3,
            k: 3,
            gamma: 0.2,
            shared_head: true,
            components: vec![
                ComponentSpec::Quadratic {
                    alpha: 0.3,
                    hidden: vec![4],
                },
                ComponentSpec::MaxAffine {
                    pieces: 5,
                    hidden: vec![4],
                },
                ComponentSpec::MaxSquared {
                    pieces: 5,
                    hidden: vec![4],
                },
            ],
            head: HeadSpec::MonotoneNet {
                hidden: vec![5, 3],
                activations: vec![Activation::Tanh, Activation::Tanh],
            },
            scaling: InputScaling {
                x_center: vec![0.5, -0.5],
                x_half: vec![2.0, 1.0],
                p_center: vec![0.0; 3],
                p_half: vec![1.0; 3],
            },
        };
        let model = spec.build(13).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let n = 7;
        let xs = Array2::from_shape_fn((n, 2), |_| rng.random_range(-2.0..2.0));
        let ps = Array2::from_shape_fn((n, 3), |_| rng.random_range(-1.0..1.0));

        let tape = Tape::new();
        let bound = model.bind(&tape);
        let xv = tape.constant(xs.clone());
        let pv = tape.constant(ps.clone());
        let out = bound.forward(&tape, xv, pv);
        let z = tape.value(out.z);
        let sm = tape.value(out.smoothed);

        for i in 0..n {
            let x: Vec<f64> = xs.row(i).to_vec();
            let p: Vec<f64> = ps.row(i).to_vec();
            let zs = model.head_values(&x, &p).unwrap();
            for (j, &want) in zs.iter().enumerate() {
                assert!(
                    (z[[i, j]] - want).abs() < 1e-11,
                    "z mismatch at ({i},{j}): {} vs {want}",
                    z[[i, j]]
                );
            }
            let want_sm = model.smoothed(&x, &p).unwrap();
            assert!((sm[[i, 0]] - want_sm).abs() < 1e-11);
        }
    }

    #[test]
    fn quasiconvexity_of_head_compositions() {
        let spec = ModelSpec {
            n_x: 2,
            n_p: 2,
            k: 2,
            gamma: 0.1,
            shared_head: true,
            components: vec![
                ComponentSpec::Quadratic {
                    alpha: 0.5,
                    hidden: vec![3],
                },
                ComponentSpec::MaxSquared {
                    pieces: 6,
                    hidden: vec![3],
                },
            ],
            head: HeadSpec::MonotoneNet {
                hidden: vec![5, 3],
                activations: vec![Activation::Tanh, Activation::Tanh],
            },
            scaling: InputScaling::identity(2, 2),
        };
        let model = spec.build(55).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let i = rng.random_range(0..2);
            let p: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let y: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let lam: f64 = rng.random_range(0.0..1.0);
            let mid: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(&a, &b)| lam * a + (1.0 - lam) * b)
                .collect();
            let h = |pt: &[f64]| {
                let v = model.component_value(i, pt, &p).unwrap();
                model.heads.get(i).eval(v)
            };
            assert!(h(&mid) <= h(&x).max(h(&y)) + 1e-9);
        }
    }
}
