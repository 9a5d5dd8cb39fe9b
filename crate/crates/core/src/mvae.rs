//! Mutual variational autoencoder: one VAE cell per modal, shared by all four
//! flows.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Matrix, Var};
use crate::encoder::{Modal, SubVars};
use crate::error::{GeeaError, Result};
use crate::params::{hidden_stack, run_stack, Activation, HiddenLayer, Linear, ParamStore};

/// Direction of an encode/decode pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FlowTag {
    #[serde(rename = "x->x")]
    SourceToSource,
    #[serde(rename = "y->y")]
    TargetToTarget,
    #[serde(rename = "x->y")]
    SourceToTarget,
    #[serde(rename = "y->x")]
    TargetToSource,
}

impl FlowTag {
    pub const ALL: [FlowTag; 4] = [
        FlowTag::SourceToSource,
        FlowTag::TargetToTarget,
        FlowTag::SourceToTarget,
        FlowTag::TargetToSource,
    ];
    pub const SELF: [FlowTag; 2] = [FlowTag::SourceToSource, FlowTag::TargetToTarget];
    pub const MUTUAL: [FlowTag; 2] = [FlowTag::SourceToTarget, FlowTag::TargetToSource];

    pub fn is_mutual(self) -> bool {
        matches!(self, FlowTag::SourceToTarget | FlowTag::TargetToSource)
    }

    /// KG whose sub-embeddings feed the VAE.
    pub fn input_side(self) -> crate::kgdata::Side {
        use crate::kgdata::Side;
        match self {
            FlowTag::SourceToSource | FlowTag::SourceToTarget => Side::Source,
            FlowTag::TargetToTarget | FlowTag::TargetToSource => Side::Target,
        }
    }

    /// KG whose features the reconstruction is scored against.
    pub fn output_side(self) -> crate::kgdata::Side {
        use crate::kgdata::Side;
        match self {
            FlowTag::SourceToSource | FlowTag::TargetToSource => Side::Source,
            FlowTag::TargetToTarget | FlowTag::SourceToTarget => Side::Target,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlowTag::SourceToSource => "x->x",
            FlowTag::TargetToTarget => "y->y",
            FlowTag::SourceToTarget => "x->y",
            FlowTag::TargetToSource => "y->x",
        }
    }
}

impl fmt::Display for FlowTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    /// Hidden widths of the encoder stack; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        VaeConfig {
            hidden: vec![300, 300],
            latent_dim: 300,
        }
    }
}

/// One VAE: encoder stack, μ and log-variance heads, decoder stack, output map.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeCell {
    pub encoder: Vec<HiddenLayer>,
    pub mu: Linear,
    pub log_var: Linear,
    pub decoder: Vec<HiddenLayer>,
    pub output: Linear,
}

impl VaeCell {
    fn new(store: &mut ParamStore, name: &str, dim: usize, config: &VaeConfig, rng: &mut impl Rng) -> Self {
        let encoder = hidden_stack(store, &format!("{name}.encoder"), dim, &config.hidden, |_| Activation::Relu, rng);
        let h = config.hidden.last().copied().unwrap_or(dim);
        let mu = Linear::new(store, &format!("{name}.mu"), h, config.latent_dim, rng);
        let log_var = Linear::new(store, &format!("{name}.log_var"), h, config.latent_dim, rng);
        let widths: Vec<usize> = config.hidden.iter().rev().copied().collect();
        let decoder = hidden_stack(store, &format!("{name}.decoder"), config.latent_dim, &widths, |_| Activation::Relu, rng);
        let h = widths.last().copied().unwrap_or(config.latent_dim);
        let output = Linear::new(store, &format!("{name}.output"), h, dim, rng);
        VaeCell {
            encoder,
            mu,
            log_var,
            decoder,
            output,
        }
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, z: Var) -> Var {
        let h = run_stack(&self.decoder, g, store, z);
        self.output.forward(g, store, h)
    }
}

/// VAE cells indexed by [`Modal::index`].
#[derive(Clone, Debug, PartialEq)]
pub struct MvaeParams {
    pub config: VaeConfig,
    pub dim: usize,
    pub cells: [VaeCell; 3],
}

impl MvaeParams {
    pub fn new(store: &mut ParamStore, dim: usize, config: &VaeConfig, rng: &mut impl Rng) -> Self {
        let cells = [
            VaeCell::new(store, "mvae.graph", dim, config, rng),
            VaeCell::new(store, "mvae.attr", dim, config, rng),
            VaeCell::new(store, "mvae.image", dim, config, rng),
        ];
        MvaeParams {
            config: config.clone(),
            dim,
            cells,
        }
    }

    pub fn cell(&self, modal: Modal) -> &VaeCell {
        &self.cells[modal.index()]
    }
}

/// How ε is chosen in a forward pass.
pub enum Noise<'a, R: Rng> {
    /// Fresh standard-normal draws.
    Sample(&'a mut R),
    /// ε = 0, so z = μ.
    Zero,
    /// Caller-supplied ε.
    Fixed(Matrix),
}

/// Graph nodes produced by one VAE pass.
#[derive(Clone, Debug)]
pub struct VaeVars {
    pub reconstruction: Var,
    pub z: Var,
    pub mu: Var,
    pub sigma: Var,
    pub eps: Matrix,
}

/// VAE pass inside a graph. σ = exp(½ · log_var).
pub fn vae_forward_vars<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    cell: &VaeCell,
    input: Var,
    noise: Noise<'_, R>,
) -> VaeVars {
    let h = run_stack(&cell.encoder, g, store, input);
    let mu = cell.mu.forward(g, store, h);
    let log_var = cell.log_var.forward(g, store, h);
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let shape = g.value(mu).dim();
    let eps = match noise {
        Noise::Sample(rng) => Matrix::from_shape_simple_fn(shape, || StandardNormal.sample(rng)),
        Noise::Zero => Matrix::zeros(shape),
        Noise::Fixed(e) => {
            assert_eq!(e.dim(), shape, "ε shape mismatch");
            e
        }
    };
    let eps_var = g.constant(eps.clone());
    let spread = g.mul(sigma, eps_var);
    let z = g.add(mu, spread);
    let reconstruction = cell.decode(g, store, z);
    VaeVars {
        reconstruction,
        z,
        mu,
        sigma,
        eps,
    }
}

/// Materialized result of one VAE pass.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeOutput {
    pub reconstruction: Matrix,
    pub z: Matrix,
    pub mu: Matrix,
    pub sigma: Matrix,
    pub eps: Matrix,
}

impl VaeOutput {
    fn from_vars(g: &Graph, v: &VaeVars) -> Self {
        VaeOutput {
            reconstruction: g.value(v.reconstruction).clone(),
            z: g.value(v.z).clone(),
            mu: g.value(v.mu).clone(),
            sigma: g.value(v.sigma).clone(),
            eps: v.eps.clone(),
        }
    }
}

/// Runs the VAE of `modal` on `input`.
pub fn vae_forward<R: Rng>(
    input: &Matrix,
    modal: Modal,
    params: &MvaeParams,
    store: &ParamStore,
    noise: Noise<'_, R>,
) -> Result<VaeOutput> {
    if input.ncols() != params.dim {
        return Err(GeeaError::Shape(format!(
            "VAE input width {} does not match {}",
            input.ncols(),
            params.dim
        )));
    }
    if !input.iter().all(|x| x.is_finite()) {
        return Err(GeeaError::NonFinite("VAE input".into()));
    }
    let mut g = Graph::new();
    let x = g.constant(input.clone());
    let vars = vae_forward_vars(&mut g, store, params.cell(modal), x, noise);
    Ok(VaeOutput::from_vars(&g, &vars))
}

/// Inputs to [`run_flows`]. `target` holds the sub-embeddings of the aligned
/// counterparts when the batch comes from the seed set.
#[derive(Clone, Copy, Debug)]
pub struct FlowBatch<'a> {
    pub source: &'a SubVars,
    pub target: Option<&'a SubVars>,
    pub supervised: bool,
}

/// Per-modal VAE results of one flow, indexed by [`Modal::index`].
pub type FlowVars = [VaeVars; 3];

/// Whether ε is drawn or fixed at zero for a whole set of flows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Sample,
    Zero,
}

/// Graph-level flow execution used by training.
pub fn run_flows_vars<R: Rng>(
    g: &mut Graph,
    store: &ParamStore,
    params: &MvaeParams,
    batch: FlowBatch<'_>,
    flows: &[FlowTag],
    mode: NoiseMode,
    rng: &mut R,
) -> Result<BTreeMap<FlowTag, FlowVars>> {
    let mut out = BTreeMap::new();
    for &flow in flows {
        if flow.is_mutual() && !batch.supervised {
            return Err(GeeaError::Contract(format!(
                "mutual flow {flow} requested on an unsupervised batch"
            )));
        }
        let input = match flow.input_side() {
            crate::kgdata::Side::Source => batch.source,
            crate::kgdata::Side::Target => batch
                .target
                .ok_or_else(|| GeeaError::Contract(format!("flow {flow} needs target sub-embeddings")))?,
        };
        let vars = Modal::ALL.map(|m| {
            let noise = match mode {
                NoiseMode::Zero => Noise::Zero,
                NoiseMode::Sample => Noise::Sample(&mut *rng),
            };
            vae_forward_vars(g, store, params.cell(m), input[m.index()], noise)
        });
        out.insert(flow, vars);
    }
    Ok(out)
}

/// Materialized per-modal outputs of the requested flows.
#[allow(clippy::too_many_arguments)]
pub fn run_flows<R: Rng>(
    source: &[Matrix; 3],
    target: Option<&[Matrix; 3]>,
    supervised: bool,
    flows: &[FlowTag],
    params: &MvaeParams,
    store: &ParamStore,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<BTreeMap<FlowTag, [VaeOutput; 3]>> {
    for m in source.iter().chain(target.into_iter().flatten()) {
        if !m.iter().all(|x| x.is_finite()) {
            return Err(GeeaError::NonFinite("flow input".into()));
        }
    }
    let mut g = Graph::new();
    let src = source.clone().map(|m| g.constant(m));
    let tgt = target.map(|t| t.clone().map(|m| g.constant(m)));
    let batch = FlowBatch {
        source: &src,
        target: tgt.as_ref(),
        supervised,
    };
    let vars = run_flows_vars(&mut g, store, params, batch, flows, mode, rng)?;
    Ok(vars
        .into_iter()
        .map(|(f, v)| (f, [0, 1, 2].map(|i| VaeOutput::from_vars(&g, &v[i]))))
        .collect())
}

/// Draws `count` latent vectors per modal from N(0, I) and decodes them into
/// sub-embeddings.
pub fn sample_unconditional(count: usize, params: &MvaeParams, store: &ParamStore, rng: &mut impl Rng) -> Result<[Matrix; 3]> {
    if count == 0 {
        return Err(GeeaError::Argument("sample count must be positive".into()));
    }
    let mut g = Graph::new();
    let latent = params.config.latent_dim;
    let out = Modal::ALL.map(|m| {
        let z = Matrix::from_shape_simple_fn((count, latent), || StandardNormal.sample(rng));
        let zv = g.constant(z);
        let rec = params.cell(m).decode(&mut g, store, zv);
        g.value(rec).clone()
    });
    Ok(out)
}
