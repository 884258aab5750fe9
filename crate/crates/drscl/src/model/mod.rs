//! The frozen backbone with per-task adapters, its growing classification
//! head, and exact reverse-mode gradients.
//!
//! Two backbone kinds are supported: a stack of adapted linear maps with
//! pointwise activations (the default), and a single-head self-attention
//! block over token chunks whose key and value maps carry the adapters. Two
//! adapter parameterizations are supported: a factored low-rank pair
//! `ΔW = B·A` and a full delta matrix updated directly.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape and activation of one adapted linear map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    Mlp,
    AttentionKv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Factored,
    Full,
}

/// One task's adapter for one map.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    /// Low-rank pair: `a` is r×in (dimensionality reduction), `b` is out×r
    /// (expansion); the weight contribution is `b·a`.
    Factored { a: Matrix, b: Matrix },
    /// Dense delta applied directly.
    Full { delta: Matrix },
}

impl Adapter {
    /// Accumulate this adapter's weight contribution into `acc`.
    pub fn add_contribution(&self, acc: &mut Matrix) {
        match self {
            Adapter::Factored { a, b } => {
                let ba = b.matmul(a);
                acc.add_scaled(&ba, 1.0);
            }
            Adapter::Full { delta } => acc.add_scaled(delta, 1.0),
        }
    }

    pub fn mode(&self) -> AdapterMode {
        match self {
            Adapter::Factored { .. } => AdapterMode::Factored,
            Adapter::Full { .. } => AdapterMode::Full,
        }
    }
}

/// Frozen pretrained weights plus per-task adapter stacks.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    kind: BackboneKind,
    d_in: usize,
    embed_dim: usize,
    n_tokens: usize,
    specs: Vec<LayerSpec>,
    w0: Vec<Matrix>,
    /// Attention only: the frozen, never-adapted query map.
    wq: Option<Matrix>,
    /// adapters[t][l] is task t+1's adapter on map l.
    adapters: Vec<Vec<Adapter>>,
    rank: usize,
}

impl Backbone {
    /// Stack of adapted linear maps `d_in -> hidden... -> embed_dim` with
    /// relu between layers and identity after the last.
    pub fn mlp(d_in: usize, hidden: &[usize], embed_dim: usize, rank: usize) -> Result<Self> {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let mut specs = Vec::new();
        for w in dims.windows(2) {
            specs.push(LayerSpec {
                in_dim: w[0],
                out_dim: w[1],
                activation: Activation::Relu,
            });
        }
        specs.last_mut().expect("at least one layer").activation = Activation::Identity;
        Self::validate_rank(rank, &specs)?;
        let w0 = specs
            .iter()
            .map(|s| Matrix::zeros(s.out_dim, s.in_dim))
            .collect();
        Ok(Backbone {
            kind: BackboneKind::Mlp,
            d_in,
            embed_dim,
            n_tokens: 0,
            specs,
            w0,
            wq: None,
            adapters: Vec::new(),
            rank,
        })
    }

    /// Single-head self-attention over `n_tokens` chunks of the input, with
    /// adapters on the key and value maps only. The embedding is the
    /// flattened attention output, so `embed_dim == d_in`.
    pub fn attention_kv(d_in: usize, n_tokens: usize, rank: usize) -> Result<Self> {
        if n_tokens == 0 || !d_in.is_multiple_of(n_tokens) {
            return Err(Error::Config(format!(
                "d_in {d_in} not divisible into {n_tokens} tokens"
            )));
        }
        let dt = d_in / n_tokens;
        let specs = vec![
            LayerSpec {
                in_dim: dt,
                out_dim: dt,
                activation: Activation::Identity,
            };
            2
        ];
        Self::validate_rank(rank, &specs)?;
        Ok(Backbone {
            kind: BackboneKind::AttentionKv,
            d_in,
            embed_dim: d_in,
            n_tokens,
            specs,
            w0: vec![Matrix::zeros(dt, dt); 2],
            wq: Some(Matrix::zeros(dt, dt)),
            adapters: Vec::new(),
            rank,
        })
    }

    fn validate_rank(rank: usize, specs: &[LayerSpec]) -> Result<()> {
        if rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        for (l, s) in specs.iter().enumerate() {
            if rank > s.in_dim.min(s.out_dim) {
                return Err(Error::Config(format!(
                    "rank {rank} exceeds dims of map {l} ({}x{})",
                    s.out_dim, s.in_dim
                )));
            }
        }
        Ok(())
    }

    /// Random full-parameter initialization, used before pretraining.
    pub fn init_weights(&mut self, rng: &mut SeededRng) {
        for (w, spec) in self.w0.iter_mut().zip(&self.specs) {
            let bound = 1.0 / (spec.in_dim as f64).sqrt();
            *w = rng.uniform_matrix(spec.out_dim, spec.in_dim, -bound, bound);
        }
        if let Some(wq) = &mut self.wq {
            let dt = wq.rows();
            let bound = 1.0 / (dt as f64).sqrt();
            *wq = rng.uniform_matrix(dt, dt, -bound, bound);
        }
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn num_maps(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    /// Number of tasks whose adapters are stored.
    pub fn tasks_learned(&self) -> usize {
        self.adapters.len()
    }

    pub fn w0(&self, map: usize) -> &Matrix {
        &self.w0[map]
    }

    pub fn w0_mut(&mut self, map: usize) -> &mut Matrix {
        &mut self.w0[map]
    }

    pub fn wq(&self) -> Option<&Matrix> {
        self.wq.as_ref()
    }

    pub fn wq_mut(&mut self) -> Option<&mut Matrix> {
        self.wq.as_mut()
    }

    pub fn adapter(&self, task: usize, map: usize) -> &Adapter {
        &self.adapters[task][map]
    }

    pub fn adapter_mut(&mut self, task: usize, map: usize) -> &mut Adapter {
        &mut self.adapters[task][map]
    }

    /// Append a fresh adapter stack for the next task.
    pub fn push_task(&mut self, adapters: Vec<Adapter>) -> Result<()> {
        if adapters.len() != self.num_maps() {
            return Err(Error::Contract(format!(
                "expected {} adapters, got {}",
                self.num_maps(),
                adapters.len()
            )));
        }
        for (l, (ad, spec)) in adapters.iter().zip(&self.specs).enumerate() {
            let ok = match ad {
                Adapter::Factored { a, b } => {
                    a.rows() == self.rank
                        && a.cols() == spec.in_dim
                        && b.rows() == spec.out_dim
                        && b.cols() == self.rank
                }
                Adapter::Full { delta } => {
                    delta.rows() == spec.out_dim && delta.cols() == spec.in_dim
                }
            };
            if !ok {
                return Err(Error::Contract(format!("adapter shape mismatch at map {l}")));
            }
        }
        self.adapters.push(adapters);
        Ok(())
    }

    /// `W0 + Σ_{j<=through_task} B_j·A_j` for one map. `through_task` counts
    /// how many learned tasks contribute; 0 returns the pretrained weight.
    pub fn effective_weight(&self, map: usize, through_task: usize) -> Result<Matrix> {
        if map >= self.num_maps() {
            return Err(Error::Contract(format!(
                "map index {map} out of range ({} maps)",
                self.num_maps()
            )));
        }
        if through_task > self.tasks_learned() {
            return Err(Error::Contract(format!(
                "through_task {through_task} exceeds {} learned tasks",
                self.tasks_learned()
            )));
        }
        let mut w = self.w0[map].clone();
        for task in &self.adapters[..through_task] {
            task[map].add_contribution(&mut w);
        }
        Ok(w)
    }

    /// Effective weights of all maps at one task horizon.
    pub fn effective_weights(&self, through_task: usize) -> Result<Vec<Matrix>> {
        (0..self.num_maps())
            .map(|l| self.effective_weight(l, through_task))
            .collect()
    }

    /// Forward pass with explicit per-map weights (used for the subtracted
    /// and pretrained-weight views). Captures per-map inputs when asked.
    pub fn forward_with_weights(
        &self,
        weights: &[Matrix],
        batch: &Matrix,
        capture: bool,
    ) -> Result<ForwardTrace> {
        if batch.cols() != self.d_in {
            return Err(Error::Contract(format!(
                "batch width {} != input dim {}",
                batch.cols(),
                self.d_in
            )));
        }
        if weights.len() != self.num_maps() {
            return Err(Error::Contract("weight view has wrong map count".into()));
        }
        match self.kind {
            BackboneKind::Mlp => self.forward_mlp(weights, batch, capture),
            BackboneKind::AttentionKv => self.forward_attention(weights, batch, capture),
        }
    }

    fn forward_mlp(&self, weights: &[Matrix], batch: &Matrix, capture: bool) -> Result<ForwardTrace> {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut x = batch.clone();
        for (spec, w) in self.specs.iter().zip(weights) {
            if capture {
                inputs.push(x.clone());
            }
            let z = x.matmul_a_bt(w);
            let mut next = z.clone();
            for v in next.as_mut_slice() {
                *v = spec.activation.apply(*v);
            }
            if capture {
                pre.push(z);
            }
            x = next;
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations: pre,
            embedding: x,
            logits: None,
            attn: None,
            through_task: None,
        })
    }

    fn forward_attention(
        &self,
        weights: &[Matrix],
        batch: &Matrix,
        capture: bool,
    ) -> Result<ForwardTrace> {
        let n = batch.rows();
        let t = self.n_tokens;
        let dt = self.d_in / t;
        let mut tokens = Matrix::zeros(n * t, dt);
        for i in 0..n {
            let row = batch.row(i);
            for a in 0..t {
                tokens
                    .row_mut(i * t + a)
                    .copy_from_slice(&row[a * dt..(a + 1) * dt]);
            }
        }
        let wq = self.wq.as_ref().expect("attention backbone has wq");
        let q = tokens.matmul_a_bt(wq);
        let k = tokens.matmul_a_bt(&weights[0]);
        let v = tokens.matmul_a_bt(&weights[1]);

        let scale = 1.0 / (dt as f64).sqrt();
        let mut probs = Matrix::zeros(n * t, t);
        let mut embedding = Matrix::zeros(n, self.embed_dim);
        for i in 0..n {
            for a in 0..t {
                let qrow = q.row(i * t + a);
                let mut scores = vec![0.0; t];
                for (b, s) in scores.iter_mut().enumerate() {
                    *s = crate::linalg::vec_dot(qrow, k.row(i * t + b)) * scale;
                }
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut denom = 0.0;
                for s in &mut scores {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                for (b, s) in scores.iter().enumerate() {
                    let p = s / denom;
                    probs.set(i * t + a, b, p);
                    let vrow = v.row(i * t + b);
                    let out = embedding.row_mut(i);
                    for (d, vv) in vrow.iter().enumerate() {
                        out[a * dt + d] += p * vv;
                    }
                }
            }
        }

        let (inputs, attn) = if capture {
            (
                vec![tokens.clone(), tokens.clone()],
                Some(AttnTrace {
                    tokens,
                    q,
                    k,
                    v,
                    probs,
                }),
            )
        } else {
            (Vec::new(), None)
        };
        Ok(ForwardTrace {
            inputs,
            pre_activations: Vec::new(),
            embedding,
            logits: None,
            attn,
            through_task: None,
        })
    }
}

/// Intermediate state of the attention block needed for backprop.
#[derive(Debug, Clone)]
pub struct AttnTrace {
    pub tokens: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub probs: Matrix,
}

/// Captured activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Per adapted map: the features entering it (rows are samples for MLP
    /// maps, tokens for attention key/value maps).
    pub inputs: Vec<Matrix>,
    pub pre_activations: Vec<Matrix>,
    pub embedding: Matrix,
    pub logits: Option<Matrix>,
    pub attn: Option<AttnTrace>,
    pub through_task: Option<usize>,
}

/// Growing linear classifier over the backbone embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    embed_dim: usize,
    class_ids: Vec<usize>,
    rows: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl Head {
    pub fn new(embed_dim: usize) -> Self {
        Head {
            embed_dim,
            class_ids: Vec::new(),
            rows: Vec::new(),
            bias: Vec::new(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Global class ids in growth order.
    pub fn class_ids(&self) -> &[usize] {
        &self.class_ids
    }

    pub fn index_of(&self, class_id: usize) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx]
    }

    pub fn row_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.rows[idx]
    }

    pub fn bias(&self, idx: usize) -> f64 {
        self.bias[idx]
    }

    pub fn bias_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.bias[idx]
    }

    /// Append zero-initialized rows for new classes. Existing rows are
    /// untouched.
    pub fn grow(&mut self, new_classes: &[usize]) -> Result<()> {
        for &c in new_classes {
            if self.class_ids.contains(&c) {
                return Err(Error::Contract(format!("class {c} already in head")));
            }
            self.class_ids.push(c);
            self.rows.push(vec![0.0; self.embed_dim]);
            self.bias.push(0.0);
        }
        Ok(())
    }

    /// Logits for a batch of embeddings, one column per seen class in growth
    /// order.
    pub fn logits(&self, embedding: &Matrix) -> Result<Matrix> {
        if self.is_empty() {
            return Err(Error::Contract("head has no classes".into()));
        }
        if embedding.cols() != self.embed_dim {
            return Err(Error::Contract(format!(
                "embedding dim {} != head dim {}",
                embedding.cols(),
                self.embed_dim
            )));
        }
        let mut out = Matrix::zeros(embedding.rows(), self.len());
        for i in 0..embedding.rows() {
            let e = embedding.row(i);
            for (c, row) in self.rows.iter().enumerate() {
                out.set(i, c, crate::linalg::vec_dot(e, row) + self.bias[c]);
            }
        }
        Ok(out)
    }
}

/// Forward pass through adapters of tasks `1..=through_task`, with logits.
pub fn forward(
    backbone: &Backbone,
    head: &Head,
    batch: &Matrix,
    through_task: usize,
    capture: bool,
) -> Result<ForwardTrace> {
    let weights = backbone.effective_weights(through_task)?;
    let mut trace = backbone.forward_with_weights(&weights, batch, capture)?;
    trace.logits = Some(head.logits(&trace.embedding)?);
    trace.through_task = Some(through_task);
    Ok(trace)
}

/// Embedding only (no logits).
pub fn embed(backbone: &Backbone, batch: &Matrix, through_task: usize) -> Result<Matrix> {
    let weights = backbone.effective_weights(through_task)?;
    let trace = backbone.forward_with_weights(&weights, batch, false)?;
    Ok(trace.embedding)
}

/// Raw gradients of a scalar loss with respect to every adapted map's
/// effective weight, the head, and nothing else.
#[derive(Debug, Clone)]
pub struct RawGradients {
    /// Per adapted map: dL/dW_eff, shape out×in.
    pub maps: Vec<Matrix>,
    /// Per head row (all seen classes; rows outside the loss mask are zero).
    pub head_rows: Vec<Vec<f64>>,
    pub head_bias: Vec<f64>,
}

/// Reverse-mode pass. `grad_logits` is dL/dlogits (may be zero where a class
/// mask applies); `grad_embedding` is an optional extra gradient applied
/// directly to the embedding (the triplet loss path).
pub fn backward(
    backbone: &Backbone,
    head: &Head,
    trace: &ForwardTrace,
    grad_logits: Option<&Matrix>,
    grad_embedding: Option<&Matrix>,
) -> Result<RawGradients> {
    let through_task = trace.through_task.ok_or_else(|| {
        Error::Contract("trace was not produced by forward() with a task horizon".into())
    })?;
    if trace.inputs.is_empty() {
        return Err(Error::Contract("trace captured without feature capture".into()));
    }
    let n = trace.embedding.rows();
    let embed_dim = trace.embedding.cols();

    let mut head_rows = vec![vec![0.0; head.embed_dim()]; head.len()];
    let mut head_bias = vec![0.0; head.len()];
    let mut d_embedding = Matrix::zeros(n, embed_dim);
    if let Some(ge) = grad_embedding {
        if ge.rows() != n || ge.cols() != embed_dim {
            return Err(Error::Contract("embedding gradient shape mismatch".into()));
        }
        d_embedding.add_scaled(ge, 1.0);
    }
    if let Some(gl) = grad_logits {
        if gl.rows() != n || gl.cols() != head.len() {
            return Err(Error::Contract("logit gradient shape mismatch".into()));
        }
        let embedding = &trace.embedding;
        for i in 0..n {
            for c in 0..head.len() {
                let g = gl.get(i, c);
                if g == 0.0 {
                    continue;
                }
                head_bias[c] += g;
                let e = embedding.row(i);
                for (hr, ev) in head_rows[c].iter_mut().zip(e) {
                    *hr += g * ev;
                }
                let w = head.row(c);
                let de = d_embedding.row_mut(i);
                for (dv, wv) in de.iter_mut().zip(w) {
                    *dv += g * wv;
                }
            }
        }
    }

    let maps = match backbone.kind() {
        BackboneKind::Mlp => backward_mlp(backbone, trace, through_task, &d_embedding)?,
        BackboneKind::AttentionKv => backward_attention(backbone, trace, &d_embedding)?,
    };
    Ok(RawGradients {
        maps,
        head_rows,
        head_bias,
    })
}

fn backward_mlp(
    backbone: &Backbone,
    trace: &ForwardTrace,
    through_task: usize,
    d_embedding: &Matrix,
) -> Result<Vec<Matrix>> {
    let num_maps = backbone.num_maps();
    let mut grads = vec![Matrix::zeros(1, 1); num_maps];
    let mut dx = d_embedding.clone();
    for l in (0..num_maps).rev() {
        let spec = &backbone.specs()[l];
        let z = &trace.pre_activations[l];
        let mut dz = dx.clone();
        for (g, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
            *g *= spec.activation.derivative(*zv);
        }
        grads[l] = dz.matmul_at_b(&trace.inputs[l]);
        if l > 0 {
            let w = backbone.effective_weight(l, through_task)?;
            dx = dz.matmul(&w);
        }
    }
    Ok(grads)
}

fn backward_attention(
    backbone: &Backbone,
    trace: &ForwardTrace,
    d_embedding: &Matrix,
) -> Result<Vec<Matrix>> {
    let attn = trace
        .attn
        .as_ref()
        .ok_or_else(|| Error::Contract("attention trace missing".into()))?;
    let n = d_embedding.rows();
    let t = backbone.n_tokens();
    let dt = backbone.d_in() / t;
    let scale = 1.0 / (dt as f64).sqrt();

    let mut dk = Matrix::zeros(n * t, dt);
    let mut dv = Matrix::zeros(n * t, dt);
    for i in 0..n {
        let de = d_embedding.row(i);
        // dV_b += p_ab * dO_a ; dP_ab = dO_a · v_b.
        let mut dp = Matrix::zeros(t, t);
        for a in 0..t {
            let do_a = &de[a * dt..(a + 1) * dt];
            for b in 0..t {
                let p = attn.probs.get(i * t + a, b);
                let vrow = attn.v.row(i * t + b);
                let dvrow = dv.row_mut(i * t + b);
                for (dvv, dov) in dvrow.iter_mut().zip(do_a) {
                    *dvv += p * dov;
                }
                dp.set(a, b, crate::linalg::vec_dot(do_a, vrow));
            }
        }
        // Softmax backward per query row.
        for a in 0..t {
            let mut dot = 0.0;
            for b in 0..t {
                dot += attn.probs.get(i * t + a, b) * dp.get(a, b);
            }
            for b in 0..t {
                let p = attn.probs.get(i * t + a, b);
                let ds = p * (dp.get(a, b) - dot);
                // s_ab = q_a · k_b * scale  =>  dk_b += ds * q_a * scale.
                let qrow = attn.q.row(i * t + a);
                let dkrow = dk.row_mut(i * t + b);
                for (dkv, qv) in dkrow.iter_mut().zip(qrow) {
                    *dkv += ds * qv * scale;
                }
            }
        }
    }
    let g_k = dk.matmul_at_b(&attn.tokens);
    let g_v = dv.matmul_at_b(&attn.tokens);
    Ok(vec![g_k, g_v])
}

/// Per-map adapter gradients of the current task.
#[derive(Debug, Clone)]
pub enum AdapterGrads {
    Factored { a: Matrix, b: Matrix },
    Full { delta: Matrix },
}

/// Map raw effective-weight gradients onto the current task's adapter
/// parameters: with `ΔW = B·A`, `dA = Bᵀ·G` and `dB = G·Aᵀ`; in full mode
/// `dΔW = G`. Frozen weights and older tasks' adapters receive nothing.
pub fn adapter_grads(
    backbone: &Backbone,
    task: usize,
    map_grads: &[Matrix],
) -> Result<Vec<AdapterGrads>> {
    if task >= backbone.tasks_learned() {
        return Err(Error::Contract(format!(
            "task index {task} out of range ({} learned)",
            backbone.tasks_learned()
        )));
    }
    if map_grads.len() != backbone.num_maps() {
        return Err(Error::Contract("gradient count != map count".into()));
    }
    let mut out = Vec::with_capacity(map_grads.len());
    for (l, g) in map_grads.iter().enumerate() {
        match backbone.adapter(task, l) {
            Adapter::Factored { a, b } => out.push(AdapterGrads::Factored {
                a: b.matmul_at_b(g),
                b: g.matmul_a_bt(a),
            }),
            Adapter::Full { .. } => out.push(AdapterGrads::Full { delta: g.clone() }),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_mlp(d: usize, layers: usize) -> Backbone {
        let hidden = vec![d; layers.saturating_sub(1)];
        let mut bb = Backbone::mlp(d, &hidden, d, 1).unwrap();
        for l in 0..bb.num_maps() {
            *bb.w0_mut(l) = Matrix::identity(d);
            // Identity activations so outputs pass through untouched.
        }
        let specs_len = bb.specs.len();
        for l in 0..specs_len {
            bb.specs[l].activation = Activation::Identity;
        }
        bb
    }

    #[test]
    fn effective_weight_empty_sum_is_w0() {
        let bb = identity_mlp(2, 1);
        let w = bb.effective_weight(0, 0).unwrap();
        assert_eq!(w, Matrix::identity(2));
    }

    #[test]
    fn effective_weight_factored_example() {
        let mut bb = identity_mlp(2, 1);
        let a = Matrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap();
        bb.push_task(vec![Adapter::Factored { a, b }]).unwrap();
        let w = bb.effective_weight(0, 1).unwrap();
        let expected = Matrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(w, expected);
    }

    #[test]
    fn effective_weight_full_mode_additivity_is_exact() {
        let mut rng = crate::rng::SeededRng::new(5);
        let mut bb = identity_mlp(3, 1);
        let d1 = rng.uniform_matrix(3, 3, -1.0, 1.0);
        let d2 = rng.uniform_matrix(3, 3, -1.0, 1.0);
        bb.push_task(vec![Adapter::Full { delta: d1.clone() }]).unwrap();
        bb.push_task(vec![Adapter::Full { delta: d2.clone() }]).unwrap();
        let w2 = bb.effective_weight(0, 2).unwrap();
        // Sequential accumulation: (W0 + d1) + d2, identical floating-point path.
        let mut seq = bb.w0(0).clone();
        seq.add_scaled(&d1, 1.0);
        seq.add_scaled(&d2, 1.0);
        assert_eq!(w2, seq);
    }

    #[test]
    fn effective_weight_bad_indices() {
        let bb = identity_mlp(2, 1);
        assert!(bb.effective_weight(3, 0).is_err());
        assert!(bb.effective_weight(0, 1).is_err());
    }

    #[test]
    fn forward_identity_network_is_identity() {
        let bb = identity_mlp(3, 2);
        let mut head = Head::new(3);
        head.grow(&[0]).unwrap();
        let x = Matrix::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let trace = forward(&bb, &head, &x, 0, true).unwrap();
        assert_eq!(trace.embedding, x);
    }

    #[test]
    fn forward_single_linear_layer() {
        let mut bb = identity_mlp(2, 1);
        *bb.w0_mut(0) = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let weights = bb.effective_weights(0).unwrap();
        let trace = bb.forward_with_weights(&weights, &x, false).unwrap();
        assert_eq!(trace.embedding.row(0), &[2.0, 3.0]);
    }

    #[test]
    fn relu_zeroes_negative_coordinates() {
        let mut bb = Backbone::mlp(2, &[], 2, 1).unwrap();
        bb.specs[0].activation = Activation::Relu;
        *bb.w0_mut(0) = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![-0.5, 0.7]]).unwrap();
        let weights = bb.effective_weights(0).unwrap();
        let trace = bb.forward_with_weights(&weights, &x, false).unwrap();
        assert_eq!(trace.embedding.row(0), &[0.0, 0.7]);
    }

    #[test]
    fn embed_is_deterministic() {
        let mut rng = crate::rng::SeededRng::new(1);
        let mut bb = Backbone::mlp(4, &[5], 3, 2).unwrap();
        bb.init_weights(&mut rng);
        let x = rng.uniform_matrix(3, 4, -1.0, 1.0);
        let e1 = embed(&bb, &x, 0).unwrap();
        let e2 = embed(&bb, &x, 0).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let mut rng = crate::rng::SeededRng::new(2);
        let mut bb = Backbone::mlp(3, &[4], 2, 2).unwrap();
        bb.init_weights(&mut rng);
        let zero_a = Matrix::zeros(2, 3);
        let zero_b = Matrix::zeros(4, 2);
        bb.push_task(vec![
            Adapter::Factored {
                a: rng.uniform_matrix(2, 3, -0.5, 0.5),
                b: rng.uniform_matrix(4, 2, -0.5, 0.5),
            },
            Adapter::Factored {
                a: rng.uniform_matrix(2, 4, -0.5, 0.5),
                b: rng.uniform_matrix(2, 2, -0.5, 0.5),
            },
        ])
        .unwrap();
        let _ = (zero_a, zero_b);
        let mut head = Head::new(2);
        head.grow(&[0, 1]).unwrap();
        let x = rng.uniform_matrix(2, 3, -1.0, 1.0);
        let trace = forward(&bb, &head, &x, 1, true).unwrap();
        let gl = Matrix::zeros(2, 2);
        let grads = backward(&bb, &head, &trace, Some(&gl), None).unwrap();
        for g in &grads.maps {
            assert_eq!(g.max_abs(), 0.0);
        }
        assert!(grads.head_rows.iter().all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn factored_gradient_of_a_is_zero_when_b_is_zero() {
        let mut rng = crate::rng::SeededRng::new(3);
        let mut bb = Backbone::mlp(3, &[], 3, 2).unwrap();
        bb.init_weights(&mut rng);
        bb.push_task(vec![Adapter::Factored {
            a: rng.uniform_matrix(2, 3, -0.5, 0.5),
            b: Matrix::zeros(3, 2),
        }])
        .unwrap();
        let mut head = Head::new(3);
        head.grow(&[0]).unwrap();
        let x = rng.uniform_matrix(2, 3, -1.0, 1.0);
        let trace = forward(&bb, &head, &x, 1, true).unwrap();
        let mut gl = Matrix::zeros(2, 1);
        gl.set(0, 0, 1.0);
        gl.set(1, 0, -0.3);
        let raw = backward(&bb, &head, &trace, Some(&gl), None).unwrap();
        let ad = adapter_grads(&bb, 0, &raw.maps).unwrap();
        match &ad[0] {
            AdapterGrads::Factored { a, b } => {
                assert_eq!(a.max_abs(), 0.0);
                assert!(b.max_abs() > 0.0);
            }
            _ => panic!("expected factored grads"),
        }
    }

    #[test]
    fn single_map_gradient_matches_finite_differences() {
        // Scalar "loss" = sum of outputs of one linear map; dL/dW = Σ_i 1·x_iᵀ.
        let mut rng = crate::rng::SeededRng::new(4);
        let mut bb = Backbone::mlp(3, &[], 2, 1).unwrap();
        bb.init_weights(&mut rng);
        bb.push_task(vec![Adapter::Full {
            delta: Matrix::zeros(2, 3),
        }])
        .unwrap();
        let mut head = Head::new(2);
        head.grow(&[0]).unwrap();
        let x = rng.uniform_matrix(2, 3, -1.0, 1.0);

        let loss = |bb: &Backbone| -> f64 {
            let e = embed(bb, &x, 1).unwrap();
            e.as_slice().iter().sum()
        };
        let trace = forward(&bb, &head, &x, 1, true).unwrap();
        let ones = Matrix::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let raw = backward(&bb, &head, &trace, None, Some(&ones)).unwrap();
        let analytic = match &adapter_grads(&bb, 0, &raw.maps).unwrap()[0] {
            AdapterGrads::Full { delta } => delta.clone(),
            _ => unreachable!(),
        };

        let h = 1e-5;
        for r in 0..2 {
            for c in 0..3 {
                let mut plus = bb.clone();
                if let Adapter::Full { delta } = plus.adapter_mut(0, 0) {
                    delta.set(r, c, delta.get(r, c) + h);
                }
                let mut minus = bb.clone();
                if let Adapter::Full { delta } = minus.adapter_mut(0, 0) {
                    delta.set(r, c, delta.get(r, c) - h);
                }
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic.get(r, c);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
                assert!(rel <= 1e-4, "entry ({r},{c}): analytic {a}, fd {fd}");
            }
        }
    }

    #[test]
    fn grow_head_appends_zero_rows_and_preserves_old_bytes() {
        let mut head = Head::new(3);
        head.grow(&[4, 7]).unwrap();
        assert_eq!(head.len(), 2);
        assert!(head.row(0).iter().all(|&v| v == 0.0));

        head.row_mut(0).copy_from_slice(&[1.0, 2.0, 3.0]);
        *head.bias_mut(0) = 0.5;
        let before_row: Vec<f64> = head.row(0).to_vec();
        let before_bias = head.bias(0);
        head.grow(&[9]).unwrap();
        assert_eq!(head.row(0), before_row.as_slice());
        assert_eq!(head.bias(0), before_bias);

        // New class logits are zero on any input.
        let e = Matrix::from_rows(&[vec![0.3, -0.7, 1.1]]).unwrap();
        let logits = head.logits(&e).unwrap();
        assert_eq!(logits.get(0, 2), 0.0);

        assert!(head.grow(&[4]).is_err());
    }

    #[test]
    fn forward_with_zeroed_current_adapters_matches_previous_horizon() {
        let mut rng = crate::rng::SeededRng::new(6);
        let mut bb = Backbone::mlp(4, &[5], 3, 2).unwrap();
        bb.init_weights(&mut rng);
        bb.push_task(vec![
            Adapter::Factored {
                a: rng.uniform_matrix(2, 4, -0.5, 0.5),
                b: Matrix::zeros(5, 2),
            },
            Adapter::Factored {
                a: rng.uniform_matrix(2, 5, -0.5, 0.5),
                b: Matrix::zeros(3, 2),
            },
        ])
        .unwrap();
        let x = rng.uniform_matrix(3, 4, -1.0, 1.0);
        let e1 = embed(&bb, &x, 1).unwrap();
        let e0 = embed(&bb, &x, 0).unwrap();
        assert_eq!(e1, e0);
    }

    #[test]
    fn attention_forward_shapes_and_determinism() {
        let mut rng = crate::rng::SeededRng::new(8);
        let mut bb = Backbone::attention_kv(8, 4, 2).unwrap();
        bb.init_weights(&mut rng);
        let x = rng.uniform_matrix(3, 8, -1.0, 1.0);
        let w = bb.effective_weights(0).unwrap();
        let t1 = bb.forward_with_weights(&w, &x, true).unwrap();
        let t2 = bb.forward_with_weights(&w, &x, true).unwrap();
        assert_eq!(t1.embedding, t2.embedding);
        assert_eq!(t1.embedding.rows(), 3);
        assert_eq!(t1.embedding.cols(), 8);
        assert_eq!(t1.inputs.len(), 2);
        assert_eq!(t1.inputs[0].rows(), 12);
        assert_eq!(t1.inputs[0].cols(), 2);
        // Attention rows are convex combinations: probabilities sum to one.
        let attn = t1.attn.as_ref().unwrap();
        for r in 0..attn.probs.rows() {
            let s: f64 = attn.probs.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }
}
