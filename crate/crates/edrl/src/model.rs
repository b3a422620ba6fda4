//! Desk-scale RNN-T policy network: a causal gated-recurrent audio encoder,
//! a recurrent label encoder (predictor), and a feed-forward joint network
//! producing log-probabilities over the subword vocabulary plus blank.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Ops, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub predictor_layers: usize,
    pub joint_dim: usize,
    /// Emission tokens; blank is the extra final index.
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feature_dim: 10,
            d_model: 64,
            encoder_layers: 2,
            predictor_layers: 1,
            joint_dim: 64,
            vocab_size: 24,
        }
    }
}

impl ModelConfig {
    /// Blank is always the last vocabulary index.
    pub fn blank_id(&self) -> usize {
        self.vocab_size
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("d_model", self.d_model),
            ("encoder_layers", self.encoder_layers),
            ("predictor_layers", self.predictor_layers),
            ("joint_dim", self.joint_dim),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let cell = |inp: usize| 2 * (inp * d + d * d + d); // update + candidate gates
        let mut n = 0;
        for l in 0..self.encoder_layers {
            n += cell(if l == 0 { self.feature_dim } else { d });
        }
        n += self.vocab_size * d; // embedding
        for _ in 0..self.predictor_layers {
            n += cell(d);
        }
        let j = self.joint_dim;
        let v1 = self.vocab_size + 1;
        n += d * j + d * j + j + j * v1 + v1;
        n
    }
}

/// Named trainable weights in a fixed, deterministic order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ModelParameters {
    pub fn empty() -> Self {
        ModelParameters {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(&mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Seeded uniform [-0.08, 0.08] initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParameters::empty();
        let d = cfg.d_model;
        fn tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-0.08..0.08)).collect();
            Tensor::new(shape, data).unwrap()
        }
        let cell = |params: &mut ModelParameters, prefix: &str, inp: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            for gate in ["z", "c"] {
                params.insert(&format!("{prefix}.{gate}.w_in"), tensor(vec![inp, d], rng))?;
                params.insert(&format!("{prefix}.{gate}.w_h"), tensor(vec![d, d], rng))?;
                params.insert(&format!("{prefix}.{gate}.b"), tensor(vec![1, d], rng))?;
            }
            Ok(())
        };
        for l in 0..cfg.encoder_layers {
            let inp = if l == 0 { cfg.feature_dim } else { d };
            cell(&mut params, &format!("enc.{l}"), inp, &mut rng)?;
        }
        params.insert("pred.embed", tensor(vec![cfg.vocab_size, d], &mut rng))?;
        for l in 0..cfg.predictor_layers {
            cell(&mut params, &format!("pred.{l}"), d, &mut rng)?;
        }
        let j = cfg.joint_dim;
        let v1 = cfg.vocab_size + 1;
        params.insert("joint.enc_w", tensor(vec![d, j], &mut rng))?;
        params.insert("joint.pred_w", tensor(vec![d, j], &mut rng))?;
        params.insert("joint.b", tensor(vec![1, j], &mut rng))?;
        params.insert("joint.out_w", tensor(vec![j, v1], &mut rng))?;
        params.insert("joint.out_b", tensor(vec![1, v1], &mut rng))?;
        debug_assert_eq!(params.total_len(), cfg.param_count());
        Ok(params)
    }

    /// All weights zero; used by shape and symmetry tests.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        for (_, t) in p.entries.iter_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        Ok(p)
    }
}

/// Binds a parameter store to a backend, creating (and caching) one leaf per
/// parameter so gradients accumulate on a single node.
pub struct BoundParams<'a, B: Ops> {
    backend: &'a B,
    store: &'a ModelParameters,
    cache: RefCell<HashMap<String, B::V>>,
}

impl<'a, B: Ops> BoundParams<'a, B> {
    pub fn new(backend: &'a B, store: &'a ModelParameters) -> Self {
        BoundParams {
            backend,
            store,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn get(&self, name: &str) -> Result<B::V> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(v.clone());
        }
        let t = self.store.get(name)?;
        let v = self.backend.param(name, t);
        self.cache.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }
}

/// One gated-recurrent step: h' = (1-z)*h + z*c with
/// z = sigmoid(x W_z + h U_z + b_z), c = tanh(x W_c + h U_c + b_c).
fn cell_step<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    prefix: &str,
    x: &B::V,
    h: &B::V,
) -> Result<B::V> {
    let gate = |g: &str| -> Result<B::V> {
        let xi = b.matmul(x, &p.get(&format!("{prefix}.{g}.w_in"))?)?;
        let hi = b.matmul(h, &p.get(&format!("{prefix}.{g}.w_h"))?)?;
        b.add(&b.add(&xi, &hi)?, &p.get(&format!("{prefix}.{g}.b"))?)
    };
    let z = b.sigmoid(&gate("z")?);
    let c = b.tanh(&gate("c")?);
    let keep = b.offset(&b.scale(&z, -1.0), 1.0); // 1 - z
    b.add(&b.mul(&keep, h)?, &b.mul(&z, &c)?)
}

/// Encode T frames into T causal hidden rows of width d_model.
pub fn encode<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    cfg: &ModelConfig,
    frames: &Tensor,
) -> Result<Vec<B::V>> {
    if frames.shape().len() != 2 || frames.shape()[1] != cfg.feature_dim {
        return Err(Error::Config(format!(
            "frames shape {:?} does not match feature_dim {}",
            frames.shape(),
            cfg.feature_dim
        )));
    }
    let t_len = frames.shape()[0];
    let mut hs: Vec<B::V> = (0..cfg.encoder_layers)
        .map(|_| b.constant(Tensor::zeros(vec![1, cfg.d_model])))
        .collect();
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = frames.data()[t * cfg.feature_dim..(t + 1) * cfg.feature_dim].to_vec();
        let mut x = b.constant(Tensor::new(vec![1, cfg.feature_dim], row)?);
        for l in 0..cfg.encoder_layers {
            let h = cell_step(b, p, &format!("enc.{l}"), &x, &hs[l])?;
            hs[l] = h.clone();
            x = h;
        }
        out.push(x);
    }
    Ok(out)
}

/// Recurrent state of the label encoder, one hidden row per layer.
pub struct PredState<B: Ops> {
    hs: Vec<B::V>,
}

impl<B: Ops> Clone for PredState<B> {
    fn clone(&self) -> Self {
        PredState { hs: self.hs.clone() }
    }
}

/// Start state for the empty label prefix.
pub fn predict_start<B: Ops>(b: &B, cfg: &ModelConfig) -> PredState<B> {
    PredState {
        hs: (0..cfg.predictor_layers)
            .map(|_| b.constant(Tensor::zeros(vec![1, cfg.d_model])))
            .collect(),
    }
}

impl<B: Ops> PredState<B> {
    /// Output row for the prefix consumed so far (the top layer's state).
    pub fn output(&self) -> &B::V {
        self.hs.last().expect("predictor has >= 1 layer")
    }
}

/// Advance the label encoder by one (non-blank) token.
pub fn predict_step<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    cfg: &ModelConfig,
    state: &PredState<B>,
    token: usize,
) -> Result<PredState<B>> {
    if token >= cfg.vocab_size {
        return Err(Error::Contract(format!(
            "token id {token} out of range (vocab_size {}; blank never enters the predictor)",
            cfg.vocab_size
        )));
    }
    let emb = b.row(&p.get("pred.embed")?, token)?;
    let mut x = b.reshape(&emb, vec![1, cfg.d_model])?;
    let mut hs = Vec::with_capacity(cfg.predictor_layers);
    for l in 0..cfg.predictor_layers {
        let h = cell_step(b, p, &format!("pred.{l}"), &x, &state.hs[l])?;
        hs.push(h.clone());
        x = h;
    }
    Ok(PredState { hs })
}

/// Predictor rows for every prefix of `labels`: row 0 is the start state,
/// row k depends only on the first k labels.
pub fn predict<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    cfg: &ModelConfig,
    labels: &[usize],
) -> Result<Vec<B::V>> {
    let mut state = predict_start(b, cfg);
    let mut rows = vec![state.output().clone()];
    for &tok in labels {
        state = predict_step(b, p, cfg, &state, tok)?;
        rows.push(state.output().clone());
    }
    Ok(rows)
}

/// Joint network: log-distribution over V+1 actions for one (t, u) cell.
pub fn joint<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    _cfg: &ModelConfig,
    enc_row: &B::V,
    pred_row: &B::V,
) -> Result<B::V> {
    let e = b.matmul(enc_row, &p.get("joint.enc_w")?)?;
    let q = b.matmul(pred_row, &p.get("joint.pred_w")?)?;
    let h = b.tanh(&b.add(&b.add(&e, &q)?, &p.get("joint.b")?)?);
    let logits = b.add(&b.matmul(&h, &p.get("joint.out_w")?)?, &p.get("joint.out_b")?)?;
    Ok(b.log_softmax(&logits))
}

/// T x (U+1) x (V+1) grid of output log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeLogProbs {
    pub grid: Tensor,
    pub t_len: usize,
    pub u_len: usize,
    pub vocab_size: usize,
}

/// Full lattice as backend values, rows[t][u] of shape [1, V+1].
pub fn lattice<B: Ops>(
    b: &B,
    p: &BoundParams<B>,
    cfg: &ModelConfig,
    frames: &Tensor,
    labels: &[usize],
) -> Result<Vec<Vec<B::V>>> {
    let enc = encode(b, p, cfg, frames)?;
    let pred = predict(b, p, cfg, labels)?;
    let mut rows = Vec::with_capacity(enc.len());
    for e in &enc {
        let mut urow = Vec::with_capacity(pred.len());
        for q in &pred {
            urow.push(joint(b, p, cfg, e, q)?);
        }
        rows.push(urow);
    }
    Ok(rows)
}

/// Materialize lattice values into a dense grid.
pub fn lattice_values<B: Ops>(b: &B, rows: &[Vec<B::V>], cfg: &ModelConfig) -> LatticeLogProbs {
    let t_len = rows.len();
    let u_len = rows[0].len() - 1;
    let v1 = cfg.vocab_size + 1;
    let mut data = Vec::with_capacity(t_len * (u_len + 1) * v1);
    for urow in rows {
        for cell in urow {
            data.extend_from_slice(b.value(cell).data());
        }
    }
    LatticeLogProbs {
        grid: Tensor::new(vec![t_len, u_len + 1, v1], data).unwrap(),
        t_len,
        u_len,
        vocab_size: cfg.vocab_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Eager;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            d_model: 4,
            encoder_layers: 2,
            predictor_layers: 1,
            joint_dim: 4,
            vocab_size: 3,
        }
    }

    fn rand_frames(t_len: usize, dim: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            vec![t_len, dim],
            (0..t_len * dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [small_cfg(), ModelConfig::default()] {
            let p = ModelParameters::init(&cfg, 11).unwrap();
            assert_eq!(p.total_len(), cfg.param_count());
        }
    }

    #[test]
    fn encode_shapes_and_zero_case() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::zeros(&cfg).unwrap();
        let bound = BoundParams::new(&b, &params);
        let rows = encode(&b, &bound, &cfg, &rand_frames(1, 3, 0)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].shape(), &[1, 4]);
        // zero input with zero weights stays at zero
        let zero = Tensor::zeros(vec![2, 3]);
        let rows = encode(&b, &bound, &cfg, &zero).unwrap();
        for r in rows {
            assert!(r.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn encode_feature_width_mismatch() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::zeros(&cfg).unwrap();
        let bound = BoundParams::new(&b, &params);
        assert!(encode(&b, &bound, &cfg, &rand_frames(2, 5, 0)).is_err());
    }

    #[test]
    fn encoder_causality_prefix_property() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::init(&cfg, 5).unwrap();
        let bound = BoundParams::new(&b, &params);
        let frames = rand_frames(6, 3, 1);
        let full = encode(&b, &bound, &cfg, &frames).unwrap();
        for t in 1..=6 {
            let prefix = Tensor::new(
                vec![t, 3],
                frames.data()[..t * 3].to_vec(),
            )
            .unwrap();
            let part = encode(&b, &bound, &cfg, &prefix).unwrap();
            for (a, c) in part.iter().zip(&full) {
                assert_eq!(a.data(), c.data(), "prefix rows must match exactly");
            }
        }
    }

    #[test]
    fn predictor_prefix_property_and_determinism() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::init(&cfg, 9).unwrap();
        let bound = BoundParams::new(&b, &params);
        let labels = [0usize, 2, 1, 2];
        let full = predict(&b, &bound, &cfg, &labels).unwrap();
        assert_eq!(full.len(), 5);
        for u in 0..=labels.len() {
            let part = predict(&b, &bound, &cfg, &labels[..u]).unwrap();
            for (a, c) in part.iter().zip(&full) {
                assert_eq!(a.data(), c.data());
            }
        }
        let again = predict(&b, &bound, &cfg, &labels).unwrap();
        for (a, c) in again.iter().zip(&full) {
            assert_eq!(a.data(), c.data());
        }
    }

    #[test]
    fn predictor_rejects_blank() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::zeros(&cfg).unwrap();
        let bound = BoundParams::new(&b, &params);
        assert!(predict(&b, &bound, &cfg, &[cfg.blank_id()]).is_err());
    }

    #[test]
    fn joint_zero_weights_is_uniform() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::zeros(&cfg).unwrap();
        let bound = BoundParams::new(&b, &params);
        let e = b.constant(Tensor::zeros(vec![1, 4]));
        let q = b.constant(Tensor::zeros(vec![1, 4]));
        let out = joint(&b, &bound, &cfg, &e, &q).unwrap();
        assert_eq!(out.len(), cfg.vocab_size + 1);
        let expect = -((cfg.vocab_size + 1) as f64).ln();
        for v in out.data() {
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn lattice_rows_normalize_and_match_joint() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::init(&cfg, 77).unwrap();
        let bound = BoundParams::new(&b, &params);
        let frames = rand_frames(2, 3, 2);
        let labels = [1usize];
        let rows = lattice(&b, &bound, &cfg, &frames, &labels).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].len(), 2);
        let lat = lattice_values(&b, &rows, &cfg);
        assert_eq!(lat.grid.shape(), &[2, 2, 4]);
        // normalization
        for cell in rows.iter().flatten() {
            let s: f64 = cell.data().iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
        // consistency with joint on components
        let enc = encode(&b, &bound, &cfg, &frames).unwrap();
        let pred = predict(&b, &bound, &cfg, &labels).unwrap();
        let j = joint(&b, &bound, &cfg, &enc[1], &pred[0]).unwrap();
        assert_eq!(j.data(), rows[1][0].data());
    }

    #[test]
    fn lattice_zero_weights_cells_identical() {
        let cfg = small_cfg();
        let b = Eager;
        let params = ModelParameters::zeros(&cfg).unwrap();
        let bound = BoundParams::new(&b, &params);
        let rows = lattice(&b, &bound, &cfg, &rand_frames(3, 3, 4), &[0, 1]).unwrap();
        let first = rows[0][0].data().to_vec();
        for cell in rows.iter().flatten() {
            assert_eq!(cell.data(), first.as_slice());
        }
    }
}
