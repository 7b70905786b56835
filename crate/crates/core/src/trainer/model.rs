//! The host model: modality tokens, a pre-norm transformer backbone whose
//! feed-forward layer is replaced by a geometry adapter in every k-th
//! block, replay of modality states onto the query token, and two heads.
//!
//! Each sample becomes one sequence per task of [`SEQ_LEN`] tokens:
//! `prompt_e, prompt_h, prompt_s, feature, task-query`.

use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Unary, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{GeoError, Result};
use crate::manifold::Geometry;
use crate::moe::{AdapterSlots, ExpertParams};
use crate::params::{glorot_uniform, Bound, ParamId, ParamStore};

pub const MODALITIES: [&str; 4] = ["prompt_e", "prompt_h", "prompt_s", "feature"];
pub const TASKS: [&str; 2] = ["regression", "class"];
pub const SEQ_LEN: usize = 5;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// An adapter replaces the feed-forward layer of every block whose
    /// 1-based index is a multiple of this.
    pub adapter_period: usize,
    pub ffn_hidden: usize,
    pub n_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            model_dim: 128,
            heads: 4,
            adapter_period: 4,
            ffn_hidden: 256,
            n_classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.adapter_period == 0 {
            return Err(GeoError::Config("layers and adapter_period must be at least 1".into()));
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(GeoError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_hidden == 0 || self.n_classes < 2 {
            return Err(GeoError::Config(
                "ffn_hidden must be positive and n_classes at least 2".into(),
            ));
        }
        Ok(())
    }

    /// 1-based indices of the blocks that carry an adapter.
    pub fn adapter_blocks(&self) -> Vec<usize> {
        (1..=self.layers).filter(|b| b % self.adapter_period == 0).collect()
    }
}

/// Per-sample inputs (one row per sample, modalities in [`MODALITIES`]
/// order) and targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: [Array2<f64>; 4],
    pub regression: Vec<f64>,
    pub class: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(
        modalities: [Array2<f64>; 4],
        regression: Vec<f64>,
        class: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = regression.len();
        for (m, x) in MODALITIES.iter().zip(&modalities) {
            if x.nrows() != n {
                return Err(GeoError::Validation(format!(
                    "modality {m} has {} rows, expected {n}",
                    x.nrows()
                )));
            }
        }
        if class.len() != n {
            return Err(GeoError::Validation(format!(
                "{} class targets for {n} samples",
                class.len()
            )));
        }
        if let Some(&c) = class.iter().find(|&&c| c >= n_classes) {
            return Err(GeoError::Validation(format!("class {c} outside 0..{n_classes}")));
        }
        Ok(Self {
            modalities,
            regression,
            class,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.regression.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regression.is_empty()
    }

    pub fn feature_dims(&self) -> [usize; 4] {
        [
            self.modalities[0].ncols(),
            self.modalities[1].ncols(),
            self.modalities[2].ncols(),
            self.modalities[3].ncols(),
        ]
    }

    /// Copy with every modality row scaled to unit length.
    pub fn normalized(&self) -> Result<Self> {
        let mut out = self.clone();
        for (m, x) in MODALITIES.iter().zip(out.modalities.iter_mut()) {
            for mut row in x.rows_mut() {
                let n = row.dot(&row).sqrt();
                if !(n > 0.0 && n.is_finite()) {
                    return Err(GeoError::Normalization {
                        modality: m.to_string(),
                    });
                }
                row /= n;
            }
        }
        Ok(out)
    }
}

/// Projection of one modality: `pi` is `model x feat`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalProjection {
    pub pi: Array2<f64>,
    pub alpha: f64,
}

/// `alpha_m * pi_m (x_m / |x_m|)` for each modality in order.
pub fn project_modalities(proj: &[ModalProjection; 4], inputs: [&[f64]; 4]) -> Result<Vec<Vec<f64>>> {
    proj.iter()
        .zip(inputs)
        .zip(MODALITIES)
        .map(|((p, x), name)| {
            if p.pi.ncols() != x.len() {
                return Err(GeoError::Dimension {
                    expected: p.pi.ncols(),
                    got: x.len(),
                });
            }
            let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(GeoError::Normalization {
                    modality: name.to_string(),
                });
            }
            Ok(p.pi
                .rows()
                .into_iter()
                .map(|r| p.alpha * r.iter().zip(x).map(|(w, v)| w * (v / n)).sum::<f64>())
                .collect())
        })
        .collect()
}

/// `last + h_1 + ... + h_m`, summed left to right.
pub fn replay_accumulate(last: &[f64], modality_hiddens: &[&[f64]]) -> Result<Vec<f64>> {
    let mut out = last.to_vec();
    for h in modality_hiddens {
        if h.len() != out.len() {
            return Err(GeoError::Dimension {
                expected: out.len(),
                got: h.len(),
            });
        }
        for (o, v) in out.iter_mut().zip(*h) {
            *o += v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1: (ParamId, ParamId),
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln2: (ParamId, ParamId),
    ffn: [ParamId; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ModelMeta {
    backbone: BackboneConfig,
    feature_dims: [usize; 4],
    adapter_kinds: Option<[Geometry; 3]>,
}

/// Outputs of one forward pass over a batch of `B` samples.
pub struct ForwardOut {
    /// `B x 1` numeric predictions in target units.
    pub numeric: Var,
    /// `B x n_classes`.
    pub logits: Var,
    /// Gate weights of each adapter block, `(2 B SEQ_LEN) x 3`; rows of the
    /// regression sequences come first.
    pub gates: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct GeoModel {
    pub cfg: BackboneConfig,
    pub feature_dims: [usize; 4],
    pub store: ParamStore,
    pos: ParamId,
    task: ParamId,
    proj: [(ParamId, ParamId); 4],
    blocks: Vec<BlockIds>,
    adapters: Vec<Option<AdapterSlots>>,
    adapter_kinds: Option<[Geometry; 3]>,
    final_ln: (ParamId, ParamId),
    head_num: (ParamId, ParamId),
    head_cls: (ParamId, ParamId),
    target: (ParamId, ParamId),
}

impl GeoModel {
    pub fn new(cfg: BackboneConfig, feature_dims: [usize; 4], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if feature_dims.contains(&0) {
            return Err(GeoError::Config("modality widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.model_dim;
        let small =
            |rng: &mut ChaCha8Rng, r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.random_range(-0.1..0.1));
        let pos = store.add("embed.pos", small(&mut rng, SEQ_LEN, d));
        let task = store.add("embed.task", small(&mut rng, TASKS.len(), d));
        let proj = std::array::from_fn(|m| {
            let w = store.add(
                format!("proj.{}.w", MODALITIES[m]),
                glorot_uniform(&mut rng, d, feature_dims[m]),
            );
            let a = store.add(format!("proj.{}.alpha", MODALITIES[m]), Array2::ones((1, 1)));
            (w, a)
        });
        let ln = |store: &mut ParamStore, name: String| {
            (
                store.add(format!("{name}.gamma"), Array2::ones((1, d))),
                store.add(format!("{name}.beta"), Array2::zeros((1, d))),
            )
        };
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 1..=cfg.layers {
            let ln1 = ln(&mut store, format!("block{l}.ln1"));
            let wq = store.add(format!("block{l}.attn.wq"), glorot_uniform(&mut rng, d, d));
            let wk = store.add(format!("block{l}.attn.wk"), glorot_uniform(&mut rng, d, d));
            let wv = store.add(format!("block{l}.attn.wv"), glorot_uniform(&mut rng, d, d));
            let wo = store.add(format!("block{l}.attn.wo"), glorot_uniform(&mut rng, d, d));
            let ln2 = ln(&mut store, format!("block{l}.ln2"));
            let h = cfg.ffn_hidden;
            let ffn = [
                store.add(format!("block{l}.ffn.w1"), glorot_uniform(&mut rng, h, d)),
                store.add(format!("block{l}.ffn.b1"), Array2::zeros((1, h))),
                store.add(format!("block{l}.ffn.w2"), glorot_uniform(&mut rng, d, h)),
                store.add(format!("block{l}.ffn.b2"), Array2::zeros((1, d))),
            ];
            blocks.push(BlockIds {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                ffn,
            });
        }
        let final_ln = ln(&mut store, "final_ln".into());
        let head_num = (
            store.add("head.numeric.w", glorot_uniform(&mut rng, 1, d)),
            store.add("head.numeric.b", Array2::zeros((1, 1))),
        );
        let head_cls = (
            store.add("head.class.w", glorot_uniform(&mut rng, cfg.n_classes, d)),
            store.add("head.class.b", Array2::zeros((1, cfg.n_classes))),
        );
        let target = (
            store.add("target.shift", Array2::zeros((1, 1))),
            store.add("target.scale", Array2::ones((1, 1))),
        );
        store.set_trainable(target.0, false);
        store.set_trainable(target.1, false);
        let layers = cfg.layers;
        Ok(Self {
            cfg,
            feature_dims,
            store,
            pos,
            task,
            proj,
            blocks,
            adapters: vec![None; layers],
            adapter_kinds: None,
            final_ln,
            head_num,
            head_cls,
            target,
        })
    }

    /// Numeric head output is `shift + scale * raw`.
    pub fn set_target_scaling(&mut self, shift: f64, scale: f64) {
        self.store.get_mut(self.target.0)[[0, 0]] = shift;
        self.store.get_mut(self.target.1)[[0, 0]] = scale;
    }

    pub fn adapter_kinds(&self) -> Option<[Geometry; 3]> {
        self.adapter_kinds
    }

    pub fn adapter_count(&self) -> usize {
        self.adapters.iter().flatten().count()
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &AdapterSlots)> {
        self.adapters
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.as_ref().map(|a| (i + 1, a)))
    }

    /// Inserts adapters at the configured period. Expert 0 of each adapter
    /// starts as a copy of the feed-forward layer it replaces.
    pub fn install_adapters(&mut self, kinds: [Geometry; 3], seed: u64) -> Result<()> {
        if self.adapter_kinds.is_some() {
            return Err(GeoError::Config("adapters are already installed".into()));
        }
        let (d, h) = (self.cfg.model_dim, self.cfg.ffn_hidden);
        for b in self.cfg.adapter_blocks() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (b as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let f = self.blocks[b - 1].ffn;
            let base = ExpertParams {
                w1: self.store.get(f[0]).clone(),
                b1: self.store.get(f[1]).row(0).to_owned(),
                w2: self.store.get(f[2]).clone(),
                b2: self.store.get(f[3]).row(0).to_owned(),
                ..ExpertParams::zeros(Geometry::Euclidean, d, h)
            };
            let slots = AdapterSlots::register(
                &mut self.store,
                &format!("block{b}.adapter"),
                kinds,
                d,
                h,
                Some(&base),
                &mut rng,
            );
            self.adapters[b - 1] = Some(slots);
        }
        self.adapter_kinds = Some(kinds);
        Ok(())
    }

    /// Everything except the fixed target scaling is trainable.
    pub fn unfreeze_all(&mut self) {
        self.store.set_all_trainable(true);
        self.store.set_trainable(self.target.0, false);
        self.store.set_trainable(self.target.1, false);
    }

    /// Only adapters, projections (with their scales) and heads train;
    /// attention joins them when `freeze_attention` is false.
    pub fn freeze_for_adapter_training(&mut self, freeze_attention: bool) {
        let names: Vec<(ParamId, bool)> = self
            .store
            .iter()
            .map(|(id, p)| {
                let n = &p.name;
                let on = n.starts_with("proj.")
                    || n.starts_with("head.")
                    || n.contains(".adapter.")
                    || (!freeze_attention && n.contains(".attn."));
                (id, on)
            })
            .collect();
        for (id, on) in names {
            self.store.set_trainable(id, on);
        }
    }

    /// Digest of every frozen tensor.
    pub fn frozen_digest(&self) -> String {
        self.store.digest(|p| !p.trainable)
    }

    /// Digest of the attention weights alone.
    pub fn attention_digest(&self) -> String {
        self.store.digest(|p| p.name.contains(".attn."))
    }

    /// Forward pass for a batch given unit-normalized modality rows.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, inputs: &[Array2<f64>; 4]) -> Result<ForwardOut> {
        let b = inputs[0].nrows();
        for (m, x) in inputs.iter().enumerate() {
            if x.ncols() != self.feature_dims[m] || x.nrows() != b {
                return Err(GeoError::Dimension {
                    expected: self.feature_dims[m],
                    got: x.ncols(),
                });
            }
        }
        let seqs = 2 * b;
        let dup: Arc<Vec<usize>> = Arc::new((0..seqs).map(|s| s % b).collect());
        let mut parts = Vec::with_capacity(SEQ_LEN);
        for (m, x) in inputs.iter().enumerate() {
            let xv = tape.constant(x.clone());
            let t = tape.matmul_t(xv, bound[self.proj[m].0]);
            let t = tape.mul(t, bound[self.proj[m].1]);
            parts.push(tape.gather_rows(t, dup.clone()));
        }
        let task_rows = Arc::new((0..seqs).map(|s| s / b).collect());
        parts.push(tape.gather_rows(bound[self.task], task_rows));
        let x = tape.interleave(&parts);
        let pos_rows = Arc::new((0..seqs * SEQ_LEN).map(|r| r % SEQ_LEN).collect());
        let pos = tape.gather_rows(bound[self.pos], pos_rows);
        let mut x = tape.add(x, pos);

        let mut gates = Vec::new();
        for (l, blk) in self.blocks.iter().enumerate() {
            let a = tape.layer_norm(x, bound[blk.ln1.0], bound[blk.ln1.1], LN_EPS);
            let q = tape.matmul_t(a, bound[blk.wq]);
            let k = tape.matmul_t(a, bound[blk.wk]);
            let v = tape.matmul_t(a, bound[blk.wv]);
            let att = tape.attention(q, k, v, SEQ_LEN, self.cfg.heads);
            let o = tape.matmul_t(att, bound[blk.wo]);
            x = tape.add(x, o);
            let f_in = tape.layer_norm(x, bound[blk.ln2.0], bound[blk.ln2.1], LN_EPS);
            let y = match &self.adapters[l] {
                Some(slots) => {
                    let (y, g) = slots
                        .forward(tape, bound, f_in)
                        .map_err(|e| e.context(format!("adapter in block {}", l + 1)))?;
                    gates.push(g);
                    y
                }
                None => {
                    let h = tape.matmul_t(f_in, bound[blk.ffn[0]]);
                    let h = tape.add(h, bound[blk.ffn[1]]);
                    let h = tape.unary(Unary::Gelu, h);
                    let y = tape.matmul_t(h, bound[blk.ffn[2]]);
                    tape.add(y, bound[blk.ffn[3]])
                }
            };
            x = tape.add(x, y);
        }
        let hf = tape.layer_norm(x, bound[self.final_ln.0], bound[self.final_ln.1], LN_EPS);
        let at = |t: usize| -> Arc<Vec<usize>> { Arc::new((0..seqs).map(|s| s * SEQ_LEN + t).collect()) };
        let mut last = tape.gather_rows(hf, at(SEQ_LEN - 1));
        for m in 0..MODALITIES.len() {
            let h = tape.gather_rows(hf, at(m));
            last = tape.add(last, h);
        }
        let reg = tape.gather_rows(last, Arc::new((0..b).collect()));
        let cls = tape.gather_rows(last, Arc::new((b..seqs).collect()));
        let raw = tape.matmul_t(reg, bound[self.head_num.0]);
        let raw = tape.add(raw, bound[self.head_num.1]);
        let scaled = tape.mul(raw, bound[self.target.1]);
        let numeric = tape.add(scaled, bound[self.target.0]);
        let logits = tape.matmul_t(cls, bound[self.head_cls.0]);
        let logits = tape.add(logits, bound[self.head_cls.1]);
        Ok(ForwardOut { numeric, logits, gates })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = ModelMeta {
            backbone: self.cfg.clone(),
            feature_dims: self.feature_dims,
            adapter_kinds: self.adapter_kinds,
        };
        Checkpoint::new(
            "model",
            serde_json::to_value(meta).expect("model metadata serializes"),
            &self.store,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        let mut m = Self::new(meta.backbone, meta.feature_dims, 0)?;
        if let Some(kinds) = meta.adapter_kinds {
            m.install_adapters(kinds, 0)?;
        }
        let stored = ck.store()?;
        m.store.load_values(&stored)?;
        for (id, p) in stored.iter() {
            m.store.set_trainable(id, p.trainable);
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::trainer::loss::combined_loss_on_tape;
    use ndarray::Axis;

    fn tiny_cfg(layers: usize, period: usize) -> BackboneConfig {
        BackboneConfig {
            layers,
            model_dim: 8,
            heads: 2,
            adapter_period: period,
            ffn_hidden: 6,
            n_classes: 3,
        }
    }

    fn inputs(b: usize, dims: [usize; 4], seed: u64) -> [Array2<f64>; 4] {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        std::array::from_fn(|m| {
            let mut x: Array2<f64> = Array2::from_shape_fn((b, dims[m]), |_| r.random_range(-1.0..1.0));
            for mut row in x.rows_mut() {
                let n = row.dot(&row).sqrt();
                row /= n;
            }
            x
        })
    }

    #[test]
    fn placement_rule() {
        assert_eq!(tiny_cfg(8, 4).adapter_blocks(), vec![4, 8]);
        assert_eq!(tiny_cfg(1, 1).adapter_blocks(), vec![1]);
        let dims = [3, 3, 3, 5];
        let mut m = GeoModel::new(tiny_cfg(1, 1), dims, 0).unwrap();
        m.install_adapters([Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic], 1)
            .unwrap();
        let mut t = Tape::new();
        let b = m.store.bind(&mut t);
        let out = m.forward(&mut t, &b, &inputs(2, dims, 2)).unwrap();
        assert_eq!(out.gates.len(), 1);
        assert_eq!(t.value(out.gates[0]).dim(), (2 * 2 * SEQ_LEN, 3));
        assert!(BackboneConfig {
            model_dim: 10,
            heads: 4,
            ..tiny_cfg(2, 1)
        }
        .validate()
        .is_err());
    }

    #[test]
    fn projection_examples() {
        let eye = ModalProjection {
            pi: Array2::eye(2),
            alpha: 1.0,
        };
        let zero = ModalProjection {
            alpha: 0.0,
            ..eye.clone()
        };
        let p = [eye.clone(), zero, eye.clone(), eye.clone()];
        let out = project_modalities(&p, [&[0.6, 0.8], &[3.0, 1.0], &[2.0, 0.0], &[0.0, 5.0]]).unwrap();
        assert_eq!(out[0], vec![0.6, 0.8]);
        assert_eq!(out[1], vec![0.0, 0.0]);
        assert_eq!(out[2], vec![1.0, 0.0]);
        let doubled = project_modalities(&p, [&[1.2, 1.6], &[3.0, 1.0], &[2.0, 0.0], &[0.0, 5.0]]).unwrap();
        assert_eq!(doubled[0], out[0]);
        match project_modalities(&p, [&[0.6, 0.8], &[3.0, 1.0], &[2.0, 0.0], &[0.0, 0.0]]) {
            Err(GeoError::Normalization { modality }) => assert_eq!(modality, "feature"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn replay_examples() {
        assert_eq!(
            replay_accumulate(&[1.0, 2.0], &[&[0.0, 0.0], &[0.0, 0.0]]).unwrap(),
            vec![1.0, 2.0]
        );
        assert_eq!(replay_accumulate(&[1.0, 2.0], &[&[0.5, -1.0]]).unwrap(), vec![1.5, 1.0]);
        let a = replay_accumulate(&[0.1], &[&[0.2], &[0.3], &[0.4]]).unwrap()[0];
        let b = replay_accumulate(&[0.1], &[&[0.4], &[0.3], &[0.2]]).unwrap()[0];
        assert!((a - b).abs() < 1e-12);
        assert!(replay_accumulate(&[1.0], &[&[1.0, 2.0]]).is_err());
    }

    #[test]
    fn tokens_match_plain_projection() {
        let dims = [3, 4, 2, 5];
        let m = GeoModel::new(tiny_cfg(1, 1), dims, 3).unwrap();
        let x = inputs(1, dims, 4);
        let proj: [ModalProjection; 4] = std::array::from_fn(|i| ModalProjection {
            pi: m.store.get(m.proj[i].0).clone(),
            alpha: m.store.get(m.proj[i].1)[[0, 0]],
        });
        let rows: Vec<Vec<f64>> = x.iter().map(|a| a.row(0).to_vec()).collect();
        let plain = project_modalities(&proj, [&rows[0], &rows[1], &rows[2], &rows[3]]).unwrap();
        let mut t = Tape::new();
        let b = m.store.bind(&mut t);
        for i in 0..4 {
            let xv = t.constant(x[i].clone());
            let tok = t.matmul_t(xv, b[m.proj[i].0]);
            for (a, p) in t.value(tok).row(0).iter().zip(&plain[i]) {
                assert!((a - p).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn batch_permutation_permutes_outputs() {
        let dims = [3, 3, 3, 4];
        let mut m = GeoModel::new(tiny_cfg(2, 1), dims, 5).unwrap();
        m.install_adapters([Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic], 6)
            .unwrap();
        let x = inputs(5, dims, 7);
        let perm = [3, 0, 4, 1, 2];
        let xp: [Array2<f64>; 4] = std::array::from_fn(|i| x[i].select(Axis(0), &perm));
        let run = |inp: &[Array2<f64>; 4]| {
            let mut t = Tape::new();
            let b = m.store.bind(&mut t);
            let o = m.forward(&mut t, &b, inp).unwrap();
            (t.value(o.numeric).clone(), t.value(o.logits).clone())
        };
        let (n, l) = run(&x);
        let (np, lp) = run(&xp);
        for (i, &p) in perm.iter().enumerate() {
            assert!((np[[i, 0]] - n[[p, 0]]).abs() < 1e-12);
            for c in 0..3 {
                assert!((lp[[i, c]] - l[[p, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let dims = [4, 4, 4, 6];
        let cfg = BackboneConfig {
            layers: 2,
            model_dim: 16,
            heads: 2,
            adapter_period: 2,
            ffn_hidden: 8,
            n_classes: 3,
        };
        let mut m = GeoModel::new(cfg, dims, 8).unwrap();
        m.install_adapters([Geometry::Euclidean, Geometry::Spherical, Geometry::Hyperbolic], 9)
            .unwrap();
        m.unfreeze_all();
        // break the zero-gate symmetry so every gate row matters
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let gate_ids: Vec<ParamId> = m
            .store
            .iter()
            .filter(|(_, p)| p.name.ends_with(".gate"))
            .map(|(id, _)| id)
            .collect();
        for id in gate_ids {
            let v = glorot_uniform(&mut r, 3, 16);
            m.store.get_mut(id).assign(&v);
        }
        // keep adapter inputs inside the ball: finite differences at the
        // clamp radius are dominated by the log0 singularity
        let g = m.store.find("block2.ln2.gamma").unwrap();
        m.store.get_mut(g).fill(0.05);
        let x = inputs(3, dims, 11);
        let y_num = Arc::new(vec![0.3, -1.2, 2.0]);
        let y_cls = Arc::new(vec![2, 0, 1]);
        let report = grad_check(&m.store, 1e-5, 24, |t, b| {
            let o = m.forward(t, b, &x).unwrap();
            combined_loss_on_tape(
                t,
                Some((o.logits, y_cls.clone())),
                Some((o.numeric, y_num.clone())),
                1.0,
                1.0,
            )
        });
        let trainable = m.store.iter().filter(|(_, p)| p.trainable).count();
        assert_eq!(report.tensors, trainable);
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn freezing_selects_adapter_side() {
        let mut m = GeoModel::new(tiny_cfg(2, 2), [2, 2, 2, 2], 0).unwrap();
        m.install_adapters([Geometry::Euclidean; 3], 0).unwrap();
        m.freeze_for_adapter_training(true);
        for (_, p) in m.store.iter() {
            let expect = p.name.starts_with("proj.") || p.name.starts_with("head.") || p.name.contains(".adapter.");
            assert_eq!(p.trainable, expect, "{}", p.name);
        }
        m.freeze_for_adapter_training(false);
        assert!(m.store.iter().any(|(_, p)| p.name.contains(".attn.") && p.trainable));
        let ck = m.checkpoint();
        let back = GeoModel::from_checkpoint(&ck).unwrap();
        assert_eq!(back.store, m.store);
    }
}
