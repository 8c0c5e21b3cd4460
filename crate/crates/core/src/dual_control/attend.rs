use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Graph, Init, ParamId, ParamStore, Real, Var};

/// Projections of one cross-attention from `width`-wide features to
/// `text_dim`-wide token embeddings. The output projection has no bias so a
/// zero attention result maps to a zero update.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttnIds {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
}

impl CrossAttnIds {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        text_dim: usize,
        seed: u64,
    ) -> Self {
        let lin = |fan_in| Init::FanIn {
            fan_in,
            gain: 3f64.sqrt(),
        };
        Self {
            q: store.add(&format!("{prefix}.q"), &[width, width], lin(width), seed),
            k: store.add(
                &format!("{prefix}.k"),
                &[width, text_dim],
                lin(text_dim),
                seed,
            ),
            v: store.add(
                &format!("{prefix}.v"),
                &[width, text_dim],
                lin(text_dim),
                seed,
            ),
            o: store.add(&format!("{prefix}.o"), &[width, width], lin(width), seed),
        }
    }
}

fn cross_attend<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    e: Var,
    mask: &[bool],
    ids: &CrossAttnIds,
    heads: usize,
) -> Var {
    let (wq, wk, wv, wo) = (
        g.param(ids.q),
        g.param(ids.k),
        g.param(ids.v),
        g.param(ids.o),
    );
    let q = g.linear(x, wq, None);
    let k = g.linear(e, wk, None);
    let v = g.linear(e, wv, None);
    let a = g.attention(q, k, v, heads, Some(mask));
    g.linear(a, wo, None)
}

/// Residual cross-attention from reference features `[n, c]` to token
/// embeddings `[L, D]`; masked tokens are ignored. With every token masked
/// the attention term is zero and the features pass through unchanged.
pub fn text_image_interact<T: Real>(
    g: &mut Graph<'_, T>,
    feats: Var,
    e: Var,
    mask: &[bool],
    ids: &CrossAttnIds,
    heads: usize,
) -> Var {
    let r = cross_attend(g, feats, e, mask, ids, heads);
    g.add(feats, r)
}

/// Same block used for the main branch's text conditioning.
pub(crate) fn text_cross_attention<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    e: Var,
    mask: &[bool],
    ids: &CrossAttnIds,
    heads: usize,
) -> Var {
    cross_attend(g, x, e, mask, ids, heads)
}

/// Self-attention of `q, k, v: [n, d]` over `[K_self; K_ref]` and
/// `[V_self; V_ref]`. Disabled or absent references give plain self-attention.
pub fn append_kv<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    reference: Option<(Var, Var)>,
    enabled: bool,
    heads: usize,
) -> Result<Var> {
    let d = g.shape(k)[1];
    let (k, v) = match reference {
        Some((kr, vr)) if enabled => {
            if g.shape(kr).len() != 2 || g.shape(kr)[1] != d || g.shape(vr) != g.shape(kr) {
                return Err(Error::Domain(format!(
                    "reference keys {:?} / values {:?} do not match layer width {d}",
                    g.shape(kr),
                    g.shape(vr)
                )));
            }
            (g.concat0(k, kr), g.concat0(v, vr))
        }
        _ => (k, v),
    };
    Ok(g.attention(q, k, v, heads, None))
}

/// Materialized keys and values of one self-attention layer of the reference pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KvEntry {
    pub tokens: usize,
    pub width: usize,
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub valid: bool,
}

/// One entry per self-attention layer, in network order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceKV {
    pub layers: Vec<KvEntry>,
}

impl ReferenceKV {
    pub fn from_graph<T: Real>(g: &Graph<'_, T>, kv: &[(Var, Var)], valid: bool) -> Self {
        let layers = kv
            .iter()
            .map(|&(k, v)| {
                let s = g.shape(k);
                KvEntry {
                    tokens: s[0],
                    width: s[1],
                    keys: g.value(k).iter().map(|x| x.as_f64() as f32).collect(),
                    values: g.value(v).iter().map(|x| x.as_f64() as f32).collect(),
                    valid,
                }
            })
            .collect();
        Self { layers }
    }

    /// Re-enters the entries into `g` as constant inputs.
    pub fn to_graph<T: Real>(&self, g: &mut Graph<'_, T>) -> Vec<(Var, Var)> {
        self.layers
            .iter()
            .map(|e| {
                let k = g.input(
                    e.keys.iter().map(|&x| T::lit(x as f64)).collect(),
                    &[e.tokens, e.width],
                );
                let v = g.input(
                    e.values.iter().map(|&x| T::lit(x as f64)).collect(),
                    &[e.tokens, e.width],
                );
                (k, v)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(q: &[f64], k: &[f64], v: &[f64], n: usize, m: usize, d: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let s: Vec<f64> = (0..m)
                .map(|j| {
                    (0..d).map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (d as f64).sqrt()
                })
                .collect();
            let mx = s.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = s.iter().map(|x| (x - mx).exp()).sum();
            for j in 0..m {
                let w = (s[j] - mx).exp() / z;
                for c in 0..d {
                    out[i * d + c] += w * v[j * d + c];
                }
            }
        }
        out
    }

    #[test]
    fn disabled_append_is_plain_self_attention() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let q = g.input(vec![0.1, 0.5, -0.3, 0.2], &[2, 2]);
        let k = g.input(vec![0.4, -0.1, 0.3, 0.9], &[2, 2]);
        let v = g.input(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let kr = g.input(vec![5.0, 5.0], &[1, 2]);
        let plain = g.attention(q, k, v, 1, None);
        let off = append_kv(&mut g, q, k, v, Some((kr, kr)), false, 1).unwrap();
        assert_eq!(g.value(plain), g.value(off));
        let bad = g.input(vec![1.0; 3], &[1, 3]);
        assert!(append_kv(&mut g, q, k, v, Some((bad, bad)), true, 1).is_err());
        let on = append_kv(&mut g, q, k, v, Some((kr, kr)), true, 1).unwrap();
        let want = dense(
            &[0.1, 0.5, -0.3, 0.2],
            &[0.4, -0.1, 0.3, 0.9, 5.0, 5.0],
            &[1.0, 2.0, 3.0, 4.0, 5.0, 5.0],
            2,
            3,
            2,
        );
        for (a, b) in g.value(on).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
