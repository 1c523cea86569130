//! Mixture-of-experts controller between the text encoder and the denoiser.
//!
//! For every token `x` of the encoded instruction the controller produces
//!
//! ```text
//! c = Σ_i g_i(x) · f_i(x) + x,        g(x) = softmax(W x + b)
//! ```
//!
//! where each expert `f_i` is a two-layer ReLU feed-forward network whose
//! output width equals its input width, so the residual add is well formed.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{init_weight, seeded};
use crate::tensor::{softmax, Tensor};
use crate::text::{Family, Instruction, TextFeature};

/// How the gate sees an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GatePooling {
    /// One gate decision per token.
    #[default]
    None,
    /// One gate decision from the mean token, shared by all tokens.
    Mean,
}

impl GatePooling {
    pub fn as_str(self) -> &'static str {
        match self {
            GatePooling::None => "none",
            GatePooling::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GatePooling::None),
            "mean" => Ok(GatePooling::Mean),
            other => Err(Error::Config(format!("unknown gate pooling {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoeConfig {
    pub dim: usize,
    pub hidden: usize,
    pub experts: usize,
    pub pooling: GatePooling,
}

impl MoeConfig {
    /// Three experts with a 4× hidden expansion.
    pub fn with_dim(dim: usize) -> Self {
        Self {
            dim,
            hidden: 4 * dim,
            experts: 3,
            pooling: GatePooling::None,
        }
    }
}

/// One two-layer feed-forward expert.
#[derive(Debug, Clone)]
pub struct Expert {
    pub index: usize,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct Gate {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Gate output for one token (or one pooled instruction).
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub weights: Vec<f64>,
    /// Zero-based index of the largest weight; ties go to the lowest index.
    pub dominant: usize,
}

impl GateDecision {
    pub fn from_weights(weights: Vec<f64>) -> Self {
        let dominant = argmax_lowest(&weights);
        Self { weights, dominant }
    }
}

/// Index of the maximum, preferring the lowest index on ties.
pub fn argmax_lowest(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct MoeController {
    config: MoeConfig,
    experts: Vec<Expert>,
    gate: Gate,
}

impl MoeController {
    pub fn new(store: &mut ParamStore, config: MoeConfig, seed: u64) -> Result<Self> {
        if config.experts == 0 || config.dim == 0 || config.hidden == 0 {
            return Err(Error::Config(format!("bad controller config {config:?}")));
        }
        let mut rng = seeded(seed);
        let (d, h, n) = (config.dim, config.hidden, config.experts);
        let mut experts = Vec::with_capacity(n);
        for i in 0..n {
            experts.push(Expert {
                index: i,
                w1: store.add(format!("moe.expert{i}.w1"), init_weight(&mut rng, &[d, h], d))?,
                b1: store.add(format!("moe.expert{i}.b1"), Tensor::zeros(&[h]))?,
                w2: store.add(format!("moe.expert{i}.w2"), init_weight(&mut rng, &[h, d], h))?,
                b2: store.add(format!("moe.expert{i}.b2"), Tensor::zeros(&[d]))?,
            });
        }
        let gate = Gate {
            weight: store.add("moe.gate.weight", init_weight(&mut rng, &[d, n], d))?,
            bias: store.add("moe.gate.bias", Tensor::zeros(&[n]))?,
        };
        Ok(Self { config, experts, gate })
    }

    pub fn attach(store: &ParamStore, config: MoeConfig) -> Result<Self> {
        let find = |n: String| store.id_of(&n).ok_or_else(|| Error::State(format!("missing parameter {n}")));
        let experts = (0..config.experts)
            .map(|i| {
                Ok(Expert {
                    index: i,
                    w1: find(format!("moe.expert{i}.w1"))?,
                    b1: find(format!("moe.expert{i}.b1"))?,
                    w2: find(format!("moe.expert{i}.w2"))?,
                    b2: find(format!("moe.expert{i}.b2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = Gate {
            weight: find("moe.gate.weight".into())?,
            bias: find("moe.gate.bias".into())?,
        };
        Ok(Self { config, experts, gate })
    }

    pub fn config(&self) -> MoeConfig {
        self.config
    }

    pub fn experts(&self) -> &[Expert] {
        &self.experts
    }

    pub fn gate(&self) -> &Gate {
        &self.gate
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.experts.iter().flat_map(|e| [e.w1, e.b1, e.w2, e.b2]).collect();
        ids.extend([self.gate.weight, self.gate.bias]);
        ids
    }

    pub fn expert_param_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(|e| [e.w1, e.b1, e.w2, e.b2]).collect()
    }

    /// `softmax(W x + b)` for a single token.
    pub fn gate_forward(&self, store: &ParamStore, token: &[f64]) -> Result<GateDecision> {
        self.check_token("gate_forward", token)?;
        let logits = affine(token, store.value(self.gate.weight), store.value(self.gate.bias));
        let g = softmax(&Tensor::vector(logits))?;
        Ok(GateDecision::from_weights(g.into_data()))
    }

    /// `W2 · relu(W1 · token + b1) + b2`.
    pub fn expert_forward(&self, store: &ParamStore, expert: &Expert, token: &[f64]) -> Result<Vec<f64>> {
        self.check_token("expert_forward", token)?;
        let hidden: Vec<f64> = affine(token, store.value(expert.w1), store.value(expert.b1))
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        Ok(affine(&hidden, store.value(expert.w2), store.value(expert.b2)))
    }

    /// Records `c = Σ g_i(x) f_i(x) + x` for `x: [L, d]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let gates = self.gate_probabilities(tape, x)?;
        let mut mix: Option<Var> = None;
        for (i, e) in self.experts.iter().enumerate() {
            let f = self.expert_var(tape, e, x)?;
            let g = tape.column(gates, i)?;
            let weighted = tape.mul_row_scalar(f, g)?;
            mix = Some(match mix {
                Some(m) => tape.add(m, weighted)?,
                None => weighted,
            });
        }
        tape.add(mix.expect("at least one expert"), x)
    }

    /// Gate probabilities `[L, n]` as recorded on the tape.
    pub fn gate_probabilities(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.config.dim {
            return Err(Error::Dimension {
                op: "controller_forward",
                left: shape,
                right: vec![self.config.dim],
            });
        }
        let (w, b) = (tape.param(self.gate.weight), tape.param(self.gate.bias));
        match self.config.pooling {
            GatePooling::None => {
                let logits = tape.matmul(x, w)?;
                let logits = tape.add_row_bias(logits, b)?;
                Ok(tape.softmax_rows(logits))
            }
            GatePooling::Mean => {
                let pooled = tape.mean_rows(x);
                let logits = tape.matmul(pooled, w)?;
                let logits = tape.add_row_bias(logits, b)?;
                let g = tape.softmax_rows(logits);
                tape.repeat_rows(g, shape[0])
            }
        }
    }

    fn expert_var(&self, tape: &mut Tape<'_>, e: &Expert, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (tape.param(e.w1), tape.param(e.b1), tape.param(e.w2), tape.param(e.b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row_bias(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row_bias(o, b2)
    }

    /// Condition `c` for a whole text feature, outside of training.
    pub fn controller_forward(&self, store: &ParamStore, x: &TextFeature) -> Result<TextFeature> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.tensor().clone());
        let c = self.forward(&mut tape, xv)?;
        TextFeature::new(tape.value(c).clone())
    }

    /// Instruction-level gate: the per-token gate weights averaged over
    /// tokens, or the pooled gate when pooling is `Mean`.
    pub fn instruction_gate(&self, store: &ParamStore, x: &TextFeature) -> Result<GateDecision> {
        let mut tape = Tape::new(store);
        let xv = tape.constant(x.tensor().clone());
        let g = self.gate_probabilities(&mut tape, xv)?;
        let pooled = tape.mean_rows(g);
        Ok(GateDecision::from_weights(tape.value(pooled).data().to_vec()))
    }

    fn check_token(&self, op: &'static str, token: &[f64]) -> Result<()> {
        if token.len() != self.config.dim {
            return Err(Error::Dimension {
                op,
                left: vec![token.len()],
                right: vec![self.config.dim],
            });
        }
        Ok(())
    }
}

/// `xᵀ W + b` for a row vector `x`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let cols = w.shape()[1];
    let mut out = b.data().to_vec();
    for (i, &xv) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data()[i * cols..(i + 1) * cols]) {
            *o += xv * wv;
        }
    }
    debug_assert_eq!(out.len(), cols);
    out
}

/// One line of the routing record file.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingRecord {
    pub text: String,
    pub family: Family,
    pub weights: Vec<f64>,
    pub dominant: usize,
}

/// Which experts each task family ends up routed to.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingReport {
    /// `counts[family][expert]`, families in [`Family::ALL`] order.
    pub counts: Vec<Vec<usize>>,
    pub total: usize,
    /// Σ over families of the largest count, divided by the corpus size.
    pub purity: f64,
    /// Family → expert under the best one-to-one assignment, if the
    /// controller has at least as many experts as there are families.
    pub assignment: Option<Vec<usize>>,
    /// Instructions routed consistently with `assignment`, over the corpus size.
    pub assignment_purity: f64,
    pub records: Vec<RoutingRecord>,
}

impl RoutingReport {
    /// Builds the report from per-instruction decisions.
    pub fn from_records(records: Vec<RoutingRecord>, experts: usize) -> Self {
        let mut counts = vec![vec![0usize; experts]; Family::ALL.len()];
        for r in &records {
            counts[r.family.index()][r.dominant] += 1;
        }
        let total = records.len();
        let best: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
        let purity = if total == 0 { 0.0 } else { best as f64 / total as f64 };
        let assignment = best_assignment(&counts, experts);
        let matched = assignment
            .as_ref()
            .map_or(0, |a| a.iter().enumerate().map(|(f, &e)| counts[f][e]).sum::<usize>());
        let assignment_purity = if total == 0 { 0.0 } else { matched as f64 / total as f64 };
        Self {
            counts,
            total,
            purity,
            assignment,
            assignment_purity,
            records,
        }
    }

    /// Majority expert of each family, ties to the lowest index.
    pub fn majority_experts(&self) -> Vec<usize> {
        self.counts
            .iter()
            .map(|row| {
                let as_f: Vec<f64> = row.iter().map(|&c| c as f64).collect();
                argmax_lowest(&as_f)
            })
            .collect()
    }

    /// True when the best one-to-one assignment accounts for every
    /// family's majority, i.e. the families specialise on distinct experts.
    pub fn is_specialized(&self) -> bool {
        self.assignment.is_some() && self.assignment_purity == self.purity
    }

    /// Plain-text table (experts numbered from 1).
    pub fn table(&self) -> String {
        let n = self.counts.first().map_or(0, Vec::len);
        let mut out = String::from("family             ");
        for e in 0..n {
            out.push_str(&format!(" expert{:<3}", e + 1));
        }
        out.push_str(" assigned\n");
        for (f, row) in Family::ALL.iter().zip(&self.counts) {
            out.push_str(&format!("{:<19}", f.label()));
            for c in row {
                out.push_str(&format!(" {c:<9}"));
            }
            match &self.assignment {
                Some(a) => out.push_str(&format!(" expert{}\n", a[f.index()] + 1)),
                None => out.push_str(" -\n"),
            }
        }
        out.push_str(&format!(
            "purity {:.4}  matched {:.4}  total {}\n",
            self.purity, self.assignment_purity, self.total
        ));
        out
    }
}

/// Maximum-weight injective assignment of families to experts by exhaustive
/// search. Ties resolve to the lexicographically first assignment.
pub fn best_assignment(counts: &[Vec<usize>], experts: usize) -> Option<Vec<usize>> {
    if experts < counts.len() {
        return None;
    }
    let mut best: Option<(usize, Vec<usize>)> = None;
    let mut current = Vec::with_capacity(counts.len());
    let mut used = vec![false; experts];
    search(counts, &mut used, &mut current, 0, &mut best);
    best.map(|(_, a)| a)
}

fn search(counts: &[Vec<usize>], used: &mut [bool], current: &mut Vec<usize>, weight: usize, best: &mut Option<(usize, Vec<usize>)>) {
    if current.len() == counts.len() {
        if best.as_ref().is_none_or(|(w, _)| weight > *w) {
            *best = Some((weight, current.clone()));
        }
        return;
    }
    let f = current.len();
    for e in 0..used.len() {
        if used[e] {
            continue;
        }
        used[e] = true;
        current.push(e);
        search(counts, used, current, weight + counts[f][e], best);
        current.pop();
        used[e] = false;
    }
}

/// Routes every labelled instruction through encoder and gate.
pub fn routing_report<E>(controller: &MoeController, store: &ParamStore, encode: E, corpus: &[Instruction]) -> Result<RoutingReport>
where
    E: Fn(&Instruction) -> Result<TextFeature>,
{
    let mut records = Vec::with_capacity(corpus.len());
    for y in corpus {
        let family = y
            .family()
            .ok_or_else(|| Error::Input(format!("instruction {:?} carries no family label", y.text())))?;
        let x = encode(y)?;
        let g = controller.instruction_gate(store, &x)?;
        records.push(RoutingRecord {
            text: y.text().into(),
            family,
            dominant: g.dominant,
            weights: g.weights,
        });
    }
    Ok(RoutingReport::from_records(records, controller.config().experts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_tensor;

    fn controller(n: usize, seed: u64) -> (ParamStore, MoeController) {
        let mut store = ParamStore::new();
        let cfg = MoeConfig {
            experts: n,
            ..MoeConfig::with_dim(4)
        };
        let c = MoeController::new(&mut store, cfg, seed).unwrap();
        (store, c)
    }

    fn zero(store: &mut ParamStore, ids: &[ParamId]) {
        for &id in ids {
            store.value_mut(id).fill(0.0);
        }
    }

    #[test]
    fn zero_gate_is_uniform_and_ties_to_first() {
        let (mut store, c) = controller(3, 1);
        zero(&mut store, &[c.gate.weight, c.gate.bias]);
        let d = c.gate_forward(&store, &[0.3, -2.0, 1.0, 5.0]).unwrap();
        for w in &d.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(d.dominant, 0);
    }

    #[test]
    fn gate_bias_ln2() {
        let (mut store, c) = controller(3, 1);
        zero(&mut store, &[c.gate.weight]);
        store
            .value_mut(c.gate.bias)
            .data_mut()
            .copy_from_slice(&[core::f64::consts::LN_2, 0.0, 0.0]);
        let d = c.gate_forward(&store, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let expected = [0.5, 0.25, 0.25];
        for (w, e) in d.weights.iter().zip(expected) {
            assert!((w - e).abs() < 1e-15);
        }
    }

    #[test]
    fn default_has_three_experts() {
        assert_eq!(MoeConfig::with_dim(32).experts, 3);
        assert_eq!(MoeConfig::with_dim(32).hidden, 128);
    }

    #[test]
    fn gate_rejects_wrong_width() {
        let (store, c) = controller(3, 1);
        assert!(matches!(c.gate_forward(&store, &[1.0; 5]), Err(Error::Dimension { .. })));
        let e = &c.experts()[0];
        assert!(matches!(c.expert_forward(&store, e, &[1.0; 3]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_expert_is_zero() {
        let (mut store, c) = controller(3, 2);
        let e = c.experts()[1].clone();
        zero(&mut store, &[e.w1, e.b1, e.w2, e.b2]);
        assert_eq!(c.expert_forward(&store, &e, &[1.0, -1.0, 2.0, 0.5]).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn relu_blocks_negative_input_through_identity_layers() {
        let mut store = ParamStore::new();
        let cfg = MoeConfig {
            dim: 3,
            hidden: 3,
            experts: 1,
            pooling: GatePooling::None,
        };
        let c = MoeController::new(&mut store, cfg, 0).unwrap();
        let e = c.experts()[0].clone();
        let eye = Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        *store.value_mut(e.w1) = eye.clone();
        *store.value_mut(e.w2) = eye;
        let out = c.expert_forward(&store, &e, &[-1.0, -0.5, -3.0]).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let pos = c.expert_forward(&store, &e, &[1.0, -0.5, 3.0]).unwrap();
        assert_eq!(pos, vec![1.0, 0.0, 3.0]);
    }

    #[test]
    fn single_expert_ignores_gate() {
        let (mut store, c) = controller(1, 3);
        let mut rng = seeded(9);
        let x = TextFeature::new(normal_tensor(&mut rng, &[5, 4])).unwrap();
        let a = c.controller_forward(&store, &x).unwrap();
        *store.value_mut(c.gate.weight) = normal_tensor(&mut rng, &[4, 1]);
        let b = c.controller_forward(&store, &x).unwrap();
        assert_eq!(a, b);
        for t in 0..5 {
            let f = c.expert_forward(&store, &c.experts()[0], x.token(t)).unwrap();
            for (j, fv) in f.iter().enumerate() {
                assert!((a.token(t)[j] - (fv + x.token(t)[j])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn assignment_prefers_distinct_majorities() {
        let counts = vec![vec![10, 0, 0], vec![8, 2, 0], vec![0, 0, 9]];
        assert_eq!(best_assignment(&counts, 3), Some(vec![0, 1, 2]));
        let spread = vec![vec![0, 5, 1], vec![4, 0, 2], vec![1, 1, 7]];
        assert_eq!(best_assignment(&spread, 3), Some(vec![1, 0, 2]));
        assert_eq!(best_assignment(&counts, 2), None);
    }

    #[test]
    fn purity_of_single_family_corpus() {
        let records: Vec<RoutingRecord> = (0..7)
            .map(|i| RoutingRecord {
                text: format!("change the color to c{i}"),
                family: Family::LocalTranslation,
                weights: vec![0.2, 0.7, 0.1],
                dominant: 1,
            })
            .collect();
        let r = RoutingReport::from_records(records, 3);
        assert_eq!(r.purity, 1.0);
        assert!(r.is_specialized());
        assert!(r.table().contains("purity 1.0000"));
    }

    #[test]
    fn missing_label_is_input_error() {
        let (store, c) = controller(3, 4);
        let y = Instruction::new("add a moon into the sky").unwrap();
        let err = routing_report(&c, &store, |_| TextFeature::new(Tensor::zeros(&[2, 4])), &[y]).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }
}
