//! Network components: shared/private encoders, the three discriminator
//! families, the per-branch label predictor, and the attention fusion head.
//!
//! Parameters live in one flat [`ParamStore`]; components hold [`ParamId`]s into
//! it. A forward pass binds the whole store onto a fresh [`Tape`], so gradients
//! come back aligned with the store for the optimizer.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::diffcore::{Tape, Tensor, Var};
use crate::Error;

/// Added to attention scores across different samples; `exp` of it underflows to 0.
const CROSS_SAMPLE_MASK: f64 = -1e9;

/// Modality label of speech rows.
pub const SPEECH: usize = 0;
/// Modality label of text rows.
pub const TEXT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect(),
        }
    }

    /// Registers the parameters in `trainable` as leaves and the rest as constants.
    pub fn bind_selected(&self, tape: &mut Tape, trainable: &[ParamId]) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if trainable.contains(&ParamId(i)) {
                        tape.param(t.clone())
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect(),
        }
    }

    /// Registers every parameter as a constant (no gradients; evaluation).
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect(),
        }
    }
}

/// Parameter handles of one forward pass, index-aligned with the [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients of every parameter after `tape.backward`; unreachable parameters get zeros.
    pub fn gradients(&self, tape: &Tape) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
            })
            .collect()
    }
}

fn init_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-bound..=bound))
}

/// Affine map `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init_uniform(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(1, out_dim));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, Error> {
        let xw = tape.matmul(x, bound.var(self.weight))?;
        Ok(tape.add_row(xw, bound.var(self.bias))?)
    }

    pub fn forward_values(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor, Error> {
        let mut out = x.matmul(store.get(self.weight))?;
        let b = store.get(self.bias).values().to_vec();
        let n = out.cols();
        for row in out.values_mut().chunks_mut(n.max(1)) {
            for (o, bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        Ok(out)
    }
}

/// Two fully connected layers with a ReLU between them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoLayer {
    pub first: Linear,
    pub second: Linear,
}

impl TwoLayer {
    fn init(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize, out: usize) -> Self {
        TwoLayer {
            first: Linear::init(store, rng, &format!("{name}.fc1"), input, hidden),
            second: Linear::init(store, rng, &format!("{name}.fc2"), hidden, out),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, Error> {
        let (_, width) = tape.shape(x);
        if width != self.first.in_dim {
            return Err(Error::Validation(format!(
                "input width {width} does not match layer input {}",
                self.first.in_dim
            )));
        }
        let h = self.first.forward(tape, bound, x)?;
        let h = tape.relu(h);
        self.second.forward(tape, bound, h)
    }

    pub fn params(&self) -> [ParamId; 4] {
        [self.first.weight, self.first.bias, self.second.weight, self.second.bias]
    }

    pub fn input_dim(&self) -> usize {
        self.first.in_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.first.out_dim
    }

    pub fn out_dim(&self) -> usize {
        self.second.out_dim
    }
}

/// Encoder `input_dim → hidden → d`.
pub type EncoderParams = TwoLayer;
/// Modality discriminator `d → hidden → 2`.
pub type DiscriminatorParams = TwoLayer;

/// One-layer label predictor `d → C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictorParams {
    pub linear: Linear,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub heads: Vec<HeadParams>,
    pub head_dim: usize,
    /// `4·d → C` task head over the flattened fused matrix.
    pub task: Linear,
}

impl FusionParams {
    pub fn params(&self) -> Vec<ParamId> {
        self.heads
            .iter()
            .flat_map(|h| [h.query, h.key, h.value])
            .chain(self.task.params())
            .collect()
    }
}

/// Shared and private codes of one batch. Rows `0..B` of each code belong to
/// the same samples, in batch order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentPack {
    pub s_a: Var,
    pub s_t: Var,
    pub p_a: Var,
    pub p_t: Var,
    pub batch: usize,
    pub width: usize,
}

impl LatentPack {
    /// Modality labels of a `[speech; text]` row stack.
    pub fn modality_labels(&self) -> Vec<usize> {
        modality_labels(self.batch)
    }
}

pub fn modality_labels(batch: usize) -> Vec<usize> {
    let mut labels = vec![SPEECH; batch];
    labels.extend(std::iter::repeat_n(TEXT, batch));
    labels
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// `4B×d` concatenated head outputs, sample-major (rows `4i..4i+4` are sample `i`).
    pub output: Var,
    /// One `4B×4B` block-diagonal weight matrix per head.
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `B×4d` fused representation.
    pub f_task: Var,
    /// `B×C` task logits.
    pub logits: Var,
    pub attention: AttentionOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdrlModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub shared: EncoderParams,
    pub private_a: EncoderParams,
    pub private_t: EncoderParams,
    pub global_disc: DiscriminatorParams,
    pub local_discs: Vec<DiscriminatorParams>,
    pub modality_disc: DiscriminatorParams,
    pub predictor: PredictorParams,
    pub fusion: FusionParams,
}

impl FdrlModel {
    /// Uniform(±√(1/fan_in)) weights and zero biases from a seeded ChaCha stream.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self, Error> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let ModelConfig {
            d_in,
            d,
            hidden,
            classes,
            heads,
        } = *config;
        let shared = TwoLayer::init(&mut store, &mut rng, "encoder.shared", d_in, hidden, d);
        let private_a = TwoLayer::init(&mut store, &mut rng, "encoder.private_a", d_in, hidden, d);
        let private_t = TwoLayer::init(&mut store, &mut rng, "encoder.private_t", d_in, hidden, d);
        let global_disc = TwoLayer::init(&mut store, &mut rng, "disc.global", d, hidden, 2);
        let local_discs = (0..classes)
            .map(|c| TwoLayer::init(&mut store, &mut rng, &format!("disc.local{c}"), d, hidden, 2))
            .collect();
        let modality_disc = TwoLayer::init(&mut store, &mut rng, "disc.modality", d, hidden, 2);
        let predictor = PredictorParams {
            linear: Linear::init(&mut store, &mut rng, "predictor", d, classes),
        };
        let head_dim = config.head_dim();
        let heads = (0..heads)
            .map(|h| HeadParams {
                query: store.add(format!("fusion.head{h}.query"), init_uniform(&mut rng, d, head_dim)),
                key: store.add(format!("fusion.head{h}.key"), init_uniform(&mut rng, d, head_dim)),
                value: store.add(format!("fusion.head{h}.value"), init_uniform(&mut rng, d, head_dim)),
            })
            .collect();
        let task = Linear::init(&mut store, &mut rng, "fusion.task", 4 * d, classes);
        Ok(FdrlModel {
            config: config.clone(),
            store,
            shared,
            private_a,
            private_t,
            global_disc,
            local_discs,
            modality_disc,
            predictor,
            fusion: FusionParams {
                heads,
                head_dim,
                task,
            },
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.store.bind(tape)
    }

    fn check_input(&self, tape: &Tape, h: Var, which: &str) -> Result<(), Error> {
        let (_, w) = tape.shape(h);
        if w != self.config.d_in {
            return Err(Error::Validation(format!(
                "{which} features have width {w}, encoder expects {}",
                self.config.d_in
            )));
        }
        Ok(())
    }

    /// Shared codes from one parameter set for both modalities; private codes
    /// from the per-modality encoders.
    pub fn encode(&self, tape: &mut Tape, bound: &Bound, h_a: Var, h_t: Var) -> Result<LatentPack, Error> {
        self.check_input(tape, h_a, "speech")?;
        self.check_input(tape, h_t, "text")?;
        let (b_a, _) = tape.shape(h_a);
        let (b_t, _) = tape.shape(h_t);
        if b_a != b_t {
            return Err(Error::Validation(format!(
                "speech batch has {b_a} rows, text batch has {b_t}"
            )));
        }
        let s_a = self.shared.forward(tape, bound, h_a)?;
        let s_t = self.shared.forward(tape, bound, h_t)?;
        let p_a = self.private_a.forward(tape, bound, h_a)?;
        let p_t = self.private_t.forward(tape, bound, h_t)?;
        Ok(LatentPack {
            s_a,
            s_t,
            p_a,
            p_t,
            batch: b_a,
            width: self.config.d,
        })
    }

    /// Global modality logits of shared codes behind a gradient reversal layer.
    pub fn global_domain_logits(&self, tape: &mut Tape, bound: &Bound, s: Var, lambda: f64) -> Result<Var, Error> {
        let reversed = tape.grad_reverse(s, lambda)?;
        self.global_disc.forward(tape, bound, reversed)
    }

    /// Per-class modality logits: class `c`'s discriminator sees each shared
    /// row scaled by that row's (constant) probability of class `c`.
    pub fn local_domain_logits(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        s: Var,
        class_probs: &Tensor,
        lambda: f64,
    ) -> Result<Vec<Var>, Error> {
        let (rows, _) = tape.shape(s);
        validate_probabilities(class_probs, rows, self.local_discs.len())?;
        let mut out = Vec::with_capacity(self.local_discs.len());
        for (c, disc) in self.local_discs.iter().enumerate() {
            let weights: Vec<f64> = (0..rows).map(|r| class_probs.get(r, c)).collect();
            let weighted = tape.scale_rows(s, &weights)?;
            let reversed = tape.grad_reverse(weighted, lambda)?;
            out.push(disc.forward(tape, bound, reversed)?);
        }
        Ok(out)
    }

    /// Plain modality logits on private codes (no reversal).
    pub fn modality_disc_logits(&self, tape: &mut Tape, bound: &Bound, p: Var) -> Result<Var, Error> {
        self.modality_disc.forward(tape, bound, p)
    }

    pub fn predict_fine(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var, Error> {
        self.predictor.linear.forward(tape, bound, x)
    }

    /// Predictor softmax on concrete codes, outside any graph.
    pub fn class_probabilities(&self, codes: &Tensor) -> Result<Tensor, Error> {
        Ok(self
            .predictor
            .linear
            .forward_values(&self.store, codes)?
            .softmax_rows())
    }

    /// Multi-head self-attention over each sample's four stacked codes.
    /// `stacked` is `4B×d`, sample-major. Samples attend only within their block.
    pub fn self_attention(&self, tape: &mut Tape, bound: &Bound, stacked: Var, batch: usize) -> Result<AttentionOutput, Error> {
        let (rows, width) = tape.shape(stacked);
        if rows != 4 * batch || width != self.config.d {
            return Err(Error::Validation(format!(
                "fusion input is {rows}×{width}, expected {}×{}",
                4 * batch,
                self.config.d
            )));
        }
        let scale = 1.0 / (self.fusion.head_dim as f64).sqrt();
        let mask = (batch > 1).then(|| {
            Tensor::from_fn(rows, rows, |r, c| if r / 4 == c / 4 { 0.0 } else { CROSS_SAMPLE_MASK })
        });
        let mut outputs = Vec::with_capacity(self.fusion.heads.len());
        let mut weights = Vec::with_capacity(self.fusion.heads.len());
        for head in &self.fusion.heads {
            let q = tape.matmul(stacked, bound.var(head.query))?;
            let k = tape.matmul(stacked, bound.var(head.key))?;
            let v = tape.matmul(stacked, bound.var(head.value))?;
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt)?;
            let mut scores = tape.scale(scores, scale);
            if let Some(mask) = &mask {
                scores = tape.add_const(scores, mask)?;
            }
            let attn = tape.softmax_rows(scores);
            outputs.push(tape.matmul(attn, v)?);
            weights.push(attn);
        }
        let output = tape.concat_cols(&outputs)?;
        Ok(AttentionOutput { output, weights })
    }

    /// Stacks `[S_a, S_t, P_a, P_t]` per sample, applies self-attention,
    /// flattens each sample's 4×d result into `F_task` and maps it to logits.
    pub fn fuse(&self, tape: &mut Tape, bound: &Bound, pack: &LatentPack) -> Result<FusionOutput, Error> {
        let b = pack.batch;
        let code_major = tape.concat_rows(&[pack.s_a, pack.s_t, pack.p_a, pack.p_t])?;
        let order: Vec<usize> = (0..b).flat_map(|i| (0..4).map(move |j| j * b + i)).collect();
        let stacked = tape.gather_rows(code_major, &order)?;
        let attention = self.self_attention(tape, bound, stacked, b)?;
        let f_task = tape.reshape(attention.output, b, 4 * self.config.d)?;
        let logits = self.fusion.task.forward(tape, bound, f_task)?;
        Ok(FusionOutput {
            f_task,
            logits,
            attention,
        })
    }
}

pub(crate) fn validate_probabilities(probs: &Tensor, rows: usize, classes: usize) -> Result<(), Error> {
    if probs.cols() != classes {
        return Err(Error::Config(format!(
            "class probabilities have {} columns but there are {classes} subdomain discriminators",
            probs.cols()
        )));
    }
    if probs.rows() != rows {
        return Err(Error::Validation(format!(
            "class probabilities have {} rows, codes have {rows}",
            probs.rows()
        )));
    }
    for r in 0..rows {
        let s: f64 = probs.row(r).iter().sum();
        if (s - 1.0).abs() > 1e-6 || probs.row(r).iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Validation(format!(
                "class probability row {r} sums to {s}, not 1"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::gradcheck::uniform;

    fn cfg(d_in: usize, d: usize, classes: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            d_in,
            d,
            hidden: d,
            classes,
            heads,
        }
    }

    fn zero_all(model: &mut FdrlModel) {
        for t in model.store.tensors_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let c = cfg(6, 4, 3, 2);
        let a = FdrlModel::new(&c, 9).unwrap();
        let b = FdrlModel::new(&c, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.store, FdrlModel::new(&c, 10).unwrap().store);
        let w = a.store.get(a.shared.first.weight);
        let bound = (1.0f64 / 6.0).sqrt();
        assert!(w.values().iter().all(|v| v.abs() <= bound));
        assert!(a.store.get(a.shared.first.bias).values().iter().all(|&v| v == 0.0));
        assert_eq!(a.local_discs.len(), 3);
        assert_eq!(a.store.get(a.fusion.task.weight).shape(), (16, 3));
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(
            FdrlModel::new(&cfg(4, 6, 2, 4), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_weights_give_zero_latents() {
        let mut m = FdrlModel::new(&cfg(5, 4, 2, 2), 1).unwrap();
        zero_all(&mut m);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let ha = tape.constant(uniform(&mut rng, 3, 5));
        let ht = tape.constant(uniform(&mut rng, 3, 5));
        let pack = m.encode(&mut tape, &b, ha, ht).unwrap();
        for v in [pack.s_a, pack.s_t, pack.p_a, pack.p_t] {
            assert!(tape.value(v).values().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn identical_inputs_share_codes() {
        let m = FdrlModel::new(&cfg(5, 4, 2, 2), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = uniform(&mut rng, 3, 5);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let ha = tape.constant(h.clone());
        let ht = tape.constant(h);
        let pack = m.encode(&mut tape, &b, ha, ht).unwrap();
        assert_eq!(tape.value(pack.s_a).values(), tape.value(pack.s_t).values());
        assert_ne!(tape.value(pack.p_a).values(), tape.value(pack.p_t).values());
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let m = FdrlModel::new(&cfg(5, 4, 2, 2), 1).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let ha = tape.constant(Tensor::zeros(2, 4));
        let ht = tape.constant(Tensor::zeros(2, 5));
        assert!(matches!(m.encode(&mut tape, &b, ha, ht), Err(Error::Validation(_))));
    }

    #[test]
    fn global_logits_forward_independent_of_lambda() {
        let m = FdrlModel::new(&cfg(5, 4, 2, 2), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = uniform(&mut rng, 6, 4);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let sv = tape.constant(s);
        let l0 = m.global_domain_logits(&mut tape, &b, sv, 0.0).unwrap();
        let l1 = m.global_domain_logits(&mut tape, &b, sv, 1.0).unwrap();
        assert_eq!(tape.value(l0).values(), tape.value(l1).values());
        assert_eq!(tape.value(l0).shape(), (6, 2));
    }

    #[test]
    fn local_logits_route_by_probability() {
        let mut m = FdrlModel::new(&cfg(5, 4, 3, 2), 2).unwrap();
        // nonzero hidden bias so a zero input still produces distinctive logits
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = uniform(&mut rng, 2, 4);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
        for disc in m.local_discs.clone() {
            m.store.get_mut(disc.first.bias).values_mut().iter_mut().for_each(|v| *v = 0.37);
        }
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let logits = m.local_domain_logits(&mut tape, &b, sv, &onehot, 1.0).unwrap();
        assert_eq!(logits.len(), 3);
        // A discriminator fed a zero row emits its input-independent logits.
        let zero_row = {
            let mut t = Tape::new();
            let bb = m.bind(&mut t);
            let z = t.constant(Tensor::zeros(1, 4));
            let out = m.local_discs[2].forward(&mut t, &bb, z).unwrap();
            t.value(out).clone()
        };
        let class2 = tape.value(logits[2]);
        assert_eq!(class2.row(0), zero_row.row(0));
        assert_eq!(class2.row(1), zero_row.row(0));
        assert_ne!(tape.value(logits[1]).row(0), zero_row.row(0));

        // uniform weights feed S / C
        let uniform_p = Tensor::filled(2, 3, 1.0 / 3.0);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let sv = tape.constant(s.clone());
        let logits = m.local_domain_logits(&mut tape, &b, sv, &uniform_p, 1.0).unwrap();
        let mut t2 = Tape::new();
        let b2 = m.bind(&mut t2);
        let third = t2.constant(s.map(|v| v / 3.0));
        for (c, disc) in m.local_discs.iter().enumerate() {
            let expect = disc.forward(&mut t2, &b2, third).unwrap();
            assert!(tape.value(logits[c]).max_abs_diff(t2.value(expect)) < 1e-15);
        }
    }

    #[test]
    fn local_logits_validate_probabilities() {
        let m = FdrlModel::new(&cfg(5, 4, 2, 2), 2).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let s = tape.constant(Tensor::zeros(2, 4));
        let bad = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.6]]);
        assert!(matches!(
            m.local_domain_logits(&mut tape, &b, s, &bad, 1.0),
            Err(Error::Validation(_))
        ));
        let wrong_c = Tensor::filled(2, 3, 1.0 / 3.0);
        assert!(matches!(
            m.local_domain_logits(&mut tape, &b, s, &wrong_c, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_predictor_is_uniform_and_shapes_follow_batch() {
        let mut m = FdrlModel::new(&cfg(5, 4, 3, 2), 2).unwrap();
        let lin = m.predictor.linear;
        m.store.get_mut(lin.weight).values_mut().iter_mut().for_each(|v| *v = 0.0);
        for batch in [1, 4, 9] {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let x = tape.constant(Tensor::filled(batch, 4, 0.5));
            let logits = m.predict_fine(&mut tape, &b, x).unwrap();
            assert_eq!(tape.shape(logits), (batch, 3));
            let p = tape.value(logits).softmax_rows();
            assert!(p.values().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
    }

    #[test]
    fn zero_projections_give_uniform_attention_and_zero_output() {
        let mut m = FdrlModel::new(&cfg(5, 4, 2, 2), 2).unwrap();
        for h in m.fusion.heads.clone() {
            for id in [h.query, h.key, h.value] {
                m.store.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let x = tape.constant(uniform(&mut rng, 4, 4));
        let att = m.self_attention(&mut tape, &b, x, 1).unwrap();
        for w in &att.weights {
            assert!(tape.value(*w).values().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
        assert!(tape.value(att.output).values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_attention_matches_per_sample_attention() {
        let m = FdrlModel::new(&cfg(5, 4, 2, 2), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = uniform(&mut rng, 12, 4);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let att = m.self_attention(&mut tape, &b, xv, 3).unwrap();
        for w in &att.weights {
            let wv = tape.value(*w);
            for r in 0..12 {
                let s: f64 = wv.row(r).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
                for c in 0..12 {
                    if r / 4 != c / 4 {
                        assert_eq!(wv.get(r, c), 0.0);
                    }
                }
            }
        }
        for i in 0..3 {
            let mut t = Tape::new();
            let bb = m.bind(&mut t);
            let xi = t.constant(x.select_rows(&[4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3]));
            let single = m.self_attention(&mut t, &bb, xi, 1).unwrap();
            let batched = tape.value(att.output).select_rows(&[4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3]);
            assert!(batched.max_abs_diff(t.value(single.output)) < 1e-12);
        }
    }

    #[test]
    fn fuse_shapes() {
        let m = FdrlModel::new(&cfg(5, 4, 3, 2), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let b = m.bind(&mut tape);
        let ha = tape.constant(uniform(&mut rng, 3, 5));
        let ht = tape.constant(uniform(&mut rng, 3, 5));
        let pack = m.encode(&mut tape, &b, ha, ht).unwrap();
        let out = m.fuse(&mut tape, &b, &pack).unwrap();
        assert_eq!(tape.shape(out.f_task), (3, 16));
        assert_eq!(tape.shape(out.logits), (3, 3));
        assert!(tape.value(out.logits).is_finite());
        assert_eq!(out.attention.weights.len(), 2);
    }
}
