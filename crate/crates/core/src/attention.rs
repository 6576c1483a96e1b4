//! Local relation and non-local strip attention blocks.
//!
//! Both blocks follow the same scaled dot-product pattern: a query vector
//! per pixel, a set of keys and values gathered by a sliding window, and a
//! softmax over `q^T K / sqrt(C)` that mixes the values. The local block
//! gathers a `k x k` zero-padded neighbourhood around each pixel; the
//! non-local block gathers the full row the pixel belongs to. Each block
//! adds its input back through a skip connection.
//!
//! Queries and keys come from 1x1 projections that preserve the channel
//! count. Values are the block's raw input, without a projection.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{uniform, ParamStore, Session};
use crate::tape::{Tape, Var, Window};
use crate::tensor::Tensor;

/// A bound 1x1 convolution `C x C x 1 x 1` with bias.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: Var,
    pub bias: Var,
}

impl Projection {
    fn bind(s: &Session, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: s.param(&format!("{prefix}.weight"))?,
            bias: s.param(&format!("{prefix}.bias"))?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let c = tape.shape(x)[0];
        let ws = tape.shape(self.weight);
        if ws != [c, c, 1, 1] {
            return Err(Error::ShapeMismatch {
                op: "attention projection",
                expected: vec![c, c, 1, 1],
                got: ws.to_vec(),
            });
        }
        tape.conv2d(x, self.weight, self.bias, 1, 0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LocalRelationParams {
    pub query: Projection,
    pub key: Projection,
    /// Odd window size.
    pub k: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NonLocalAttentionParams {
    pub query: Projection,
    pub key: Projection,
}

#[derive(Clone, Copy, Debug)]
pub struct HybridAttentionModule {
    pub local: LocalRelationParams,
    pub nonlocal: NonLocalAttentionParams,
}

fn expect_map(tape: &Tape, f: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    let s = tape.shape(f);
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(Error::Dimension {
            op,
            detail: format!("expected a non-empty C x H x W map, got {s:?}"),
        });
    }
    Ok((s[0], s[1], s[2]))
}

/// Per-pixel attention weights of the local relation block, `[H*W, 1, k*k]`.
pub fn local_relation_weights(tape: &mut Tape, f: Var, p: &LocalRelationParams) -> Result<Var> {
    let (c, _, _) = expect_map(tape, f, "local_relation")?;
    if p.k % 2 == 0 {
        return Err(Error::InvalidConfig(format!("local window k={} must be odd", p.k)));
    }
    let q = p.query.apply(tape, f)?;
    let kp = p.key.apply(tape, f)?;
    let queries = tape.extract_patches(q, Window::Square(1))?;
    let queries = tape.transpose_last2(queries)?;
    let keys = tape.extract_patches(kp, Window::Square(p.k))?;
    let scores = tape.bmm(queries, keys)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
    tape.softmax_lastdim(scores)
}

/// `F' = pack(softmax(q_i^T K_i / sqrt(C)) V_i^T) + F` over `k x k` windows.
pub fn local_relation_forward(tape: &mut Tape, f: Var, p: &LocalRelationParams) -> Result<Var> {
    let (c, h, w) = expect_map(tape, f, "local_relation")?;
    let attn = local_relation_weights(tape, f, p)?;
    let values = tape.extract_patches(f, Window::Square(p.k))?;
    let values = tape.transpose_last2(values)?;
    let related = tape.bmm(attn, values)?;
    let related = tape.reshape(related, vec![h * w, c])?;
    let packed = tape.pack(related, Window::Square(p.k), h, w)?;
    tape.add(packed, f)
}

/// Row attention weights of the non-local block, `[H, W (query), W (key)]`.
pub fn nonlocal_attention_weights(
    tape: &mut Tape,
    f_prime: Var,
    p: &NonLocalAttentionParams,
) -> Result<Var> {
    let (c, _, _) = expect_map(tape, f_prime, "nonlocal_attention")?;
    let q = p.query.apply(tape, f_prime)?;
    let k = p.key.apply(tape, f_prime)?;
    let queries = tape.extract_patches(q, Window::Row)?;
    let queries = tape.transpose_last2(queries)?;
    let keys = tape.extract_patches(k, Window::Row)?;
    let scores = tape.bmm(queries, keys)?;
    let scores = tape.scale(scores, 1.0 / (c as f64).sqrt());
    tape.softmax_lastdim(scores)
}

/// `R = pack(softmax(Q_i^T K_i / sqrt(C)) V_i^T) + F'` over `1 x W` row windows.
pub fn nonlocal_attention_forward(
    tape: &mut Tape,
    f_prime: Var,
    p: &NonLocalAttentionParams,
) -> Result<Var> {
    let (_, h, w) = expect_map(tape, f_prime, "nonlocal_attention")?;
    let attn = nonlocal_attention_weights(tape, f_prime, p)?;
    let values = tape.extract_patches(f_prime, Window::Row)?;
    let values = tape.transpose_last2(values)?;
    let related = tape.bmm(attn, values)?;
    let related = tape.transpose_last2(related)?;
    let packed = tape.pack(related, Window::Row, h, w)?;
    tape.add(packed, f_prime)
}

pub fn hybrid_forward(tape: &mut Tape, f: Var, m: &HybridAttentionModule) -> Result<Var> {
    let f_prime = local_relation_forward(tape, f, &m.local)?;
    nonlocal_attention_forward(tape, f_prime, &m.nonlocal)
}

/// Which attention blocks reinvent the extracted feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    None,
    Local,
    NonLocal,
    Hybrid,
}

impl AttentionKind {
    pub fn has_local(self) -> bool {
        matches!(self, AttentionKind::Local | AttentionKind::Hybrid)
    }

    pub fn has_nonlocal(self) -> bool {
        matches!(self, AttentionKind::NonLocal | AttentionKind::Hybrid)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Local => "local",
            AttentionKind::NonLocal => "nonlocal",
            AttentionKind::Hybrid => "hybrid",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(AttentionKind::None),
            "local" => Ok(AttentionKind::Local),
            "nonlocal" => Ok(AttentionKind::NonLocal),
            "hybrid" => Ok(AttentionKind::Hybrid),
            other => Err(format!("unknown attention kind `{other}` (none|local|nonlocal|hybrid)")),
        }
    }
}

/// Attention stage layout: `modules` stacked copies of the selected blocks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub kind: AttentionKind,
    pub channels: usize,
    pub k: usize,
    pub modules: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::InvalidConfig(format!("local window k={} must be odd", self.k)));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("attention channels must be positive".into()));
        }
        Ok(())
    }

    /// Fresh parameters: projection weights uniform in `+-sqrt(1/C)`, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        self.validate()?;
        let c = self.channels;
        let bound = (1.0 / c as f64).sqrt();
        let mut store = ParamStore::new();
        let mut projection = |store: &mut ParamStore, path: String| {
            store.insert(format!("{path}.weight"), uniform(vec![c, c, 1, 1], bound, rng));
            store.insert(format!("{path}.bias"), Tensor::zeros(vec![c]));
        };
        if self.kind == AttentionKind::None {
            return Ok(store);
        }
        for m in 0..self.modules {
            for block in self.blocks() {
                for role in ["query", "key"] {
                    projection(&mut store, format!("module{m}.{block}.{role}"));
                }
            }
        }
        Ok(store)
    }

    fn blocks(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.kind.has_local() {
            out.push("local");
        }
        if self.kind.has_nonlocal() {
            out.push("nonlocal");
        }
        out
    }

    /// Applies every configured module in order; parameters are read from
    /// `session` under `prefix`.
    pub fn forward(&self, s: &mut Session, prefix: &str, f: Var) -> Result<Var> {
        if self.kind == AttentionKind::None {
            return Ok(f);
        }
        let mut x = f;
        for m in 0..self.modules {
            let base = format!("{prefix}.module{m}");
            if self.kind.has_local() {
                let p = LocalRelationParams {
                    query: Projection::bind(s, &format!("{base}.local.query"))?,
                    key: Projection::bind(s, &format!("{base}.local.key"))?,
                    k: self.k,
                };
                x = local_relation_forward(&mut s.tape, x, &p)?;
            }
            if self.kind.has_nonlocal() {
                let p = NonLocalAttentionParams {
                    query: Projection::bind(s, &format!("{base}.nonlocal.query"))?,
                    key: Projection::bind(s, &format!("{base}.nonlocal.key"))?,
                };
                x = nonlocal_attention_forward(&mut s.tape, x, &p)?;
            }
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckOptions};
    use crate::seeding::rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        uniform(shape.to_vec(), 1.0, &mut r)
    }

    fn proj(tape: &mut Tape, c: usize, seed: u64, zero: bool) -> Projection {
        let w = if zero {
            Tensor::zeros(vec![c, c, 1, 1])
        } else {
            random(&[c, c, 1, 1], seed)
        };
        let b = if zero {
            Tensor::zeros(vec![c])
        } else {
            random(&[c], seed + 1)
        };
        Projection {
            weight: tape.param(w),
            bias: tape.param(b),
        }
    }

    fn local(tape: &mut Tape, c: usize, k: usize, seed: u64, zero: bool) -> LocalRelationParams {
        LocalRelationParams {
            query: proj(tape, c, seed, zero),
            key: proj(tape, c, seed + 10, zero),
            k,
        }
    }

    fn nonlocal(tape: &mut Tape, c: usize, seed: u64, zero: bool) -> NonLocalAttentionParams {
        NonLocalAttentionParams {
            query: proj(tape, c, seed, zero),
            key: proj(tape, c, seed + 10, zero),
        }
    }

    #[test]
    fn local_k1_doubles_input() {
        let mut tape = Tape::new();
        let x = random(&[3, 5, 4], 1);
        let f = tape.constant(x.clone());
        let p = local(&mut tape, 3, 1, 7, false);
        let out = local_relation_forward(&mut tape, f, &p).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(tape.value(out).data(), &expected[..]);
    }

    #[test]
    fn local_uniform_attention_on_constant_map() {
        let c = 0.7;
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::full(vec![2, 4, 4], c));
        let p = local(&mut tape, 2, 3, 0, true);
        let out = local_relation_forward(&mut tape, f, &p).unwrap();
        let v = tape.value(out);
        // interior: all nine neighbours present
        assert!((v.at(&[0, 1, 1]) - 2.0 * c).abs() < 1e-12);
        // corner: four of nine neighbours present
        assert!((v.at(&[1, 0, 0]) - 13.0 * c / 9.0).abs() < 1e-12);
        // edge: six of nine
        assert!((v.at(&[0, 0, 2]) - (c + 6.0 * c / 9.0)).abs() < 1e-12);
    }

    #[test]
    fn local_weights_are_probability_vectors() {
        let mut tape = Tape::new();
        let f = tape.constant(random(&[4, 6, 6], 3));
        let p = local(&mut tape, 4, 3, 11, false);
        let a = local_relation_weights(&mut tape, f, &p).unwrap();
        assert_eq!(tape.shape(a), &[36, 1, 9]);
        for row in tape.value(a).data().chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn nonlocal_uniform_attention_on_constant_rows() {
        let mut tape = Tape::new();
        let x = Tensor::from_fn(vec![2, 3, 5], |i| ((i / 5) % 3) as f64 + 0.5);
        let f = tape.constant(x.clone());
        let p = nonlocal(&mut tape, 2, 0, true);
        let out = nonlocal_attention_forward(&mut tape, f, &p).unwrap();
        for (o, v) in tape.value(out).data().iter().zip(x.data()) {
            assert!((o - 2.0 * v).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let f = tape.constant(random(&[3, 4, 4], 1));
        let p = local(&mut tape, 2, 3, 0, false);
        assert!(matches!(
            local_relation_forward(&mut tape, f, &p),
            Err(Error::ShapeMismatch { .. })
        ));
        let q = nonlocal(&mut tape, 4, 0, false);
        assert!(nonlocal_attention_forward(&mut tape, f, &q).is_err());
    }

    #[test]
    fn hybrid_gradients_match_finite_differences() {
        let (c, h, w) = (4, 8, 8);
        let mut inputs = vec![random(&[c, h, w], 5)];
        for s in 0..8u64 {
            let shape = if s % 2 == 0 { vec![c, c, 1, 1] } else { vec![c] };
            inputs.push(random(&shape, 100 + s).map(|v| 0.5 * v));
        }
        let opts = GradCheckOptions {
            max_entries_per_input: Some(40),
            ..Default::default()
        };
        let report = check_gradients(&inputs, opts, |tape, v| {
            let pr = |i: usize| Projection {
                weight: v[i],
                bias: v[i + 1],
            };
            let m = HybridAttentionModule {
                local: LocalRelationParams {
                    query: pr(1),
                    key: pr(3),
                    k: 3,
                },
                nonlocal: NonLocalAttentionParams {
                    query: pr(5),
                    key: pr(7),
                },
            };
            let r = hybrid_forward(tape, v[0], &m)?;
            // weight the output so that every entry carries a distinct adjoint
            let n = tape.value(r).numel();
            let wts = tape.constant(Tensor::from_fn(vec![c, h, w], |i| ((i * 7919) % n) as f64 / n as f64));
            let y = tape.mul(r, wts)?;
            Ok(tape.mean(y))
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }

    #[test]
    fn init_layout() {
        let cfg = AttentionConfig {
            kind: AttentionKind::Hybrid,
            channels: 8,
            k: 3,
            modules: 2,
        };
        let store = cfg.init(&mut rng(0)).unwrap();
        assert_eq!(store.len(), 2 * 2 * 2 * 2);
        let bound = (1.0f64 / 8.0).sqrt();
        let w = store.get("module1.nonlocal.key.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        assert!(store.get("module0.local.query.bias").unwrap().data().iter().all(|&v| v == 0.0));
        let none = AttentionConfig {
            kind: AttentionKind::None,
            ..cfg
        };
        assert!(none.init(&mut rng(0)).unwrap().is_empty());
    }
}
