//! Tap ladders, exchange links and the greedy pairing heuristic.

use serde::{Deserialize, Serialize};

use crate::fusion::FusionError;
use crate::geometry::{make_adapter, AdapterSpec, FeatureShape};
use crate::nn::NetworkGraph;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn other(self) -> Side {
        match self {
            Side::A => Side::B,
            Side::B => Side::A,
        }
    }
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapPoint {
    pub model: Side,
    pub tap: String,
    pub shape: FeatureShape,
    /// Position in the model's tap ladder, starting at 0.
    pub depth: usize,
    /// Number of taps in the model's ladder.
    pub total: usize,
}

impl TapPoint {
    /// `(depth + 1) / total`, so the last tap sits at 1.
    pub fn relative_depth(&self) -> f64 {
        (self.depth + 1) as f64 / self.total as f64
    }

    pub fn ladder<T: Scalar>(model: Side, net: &NetworkGraph<T>) -> Vec<TapPoint> {
        let taps = net.list_taps();
        taps.iter()
            .map(|t| TapPoint { model, tap: t.name.clone(), shape: t.shape, depth: t.depth, total: taps.len() })
            .collect()
    }
}

fn describe_ladder(taps: &[TapPoint]) -> String {
    taps.iter().map(|t| t.shape.to_string()).collect::<Vec<_>>().join(", ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExchangeLink {
    pub source: TapPoint,
    /// The injection happens at the input of this tap's successor layer.
    pub target: TapPoint,
    pub adapter: AdapterSpec,
}

/// Hidden dense sizes and class count of the head appended after concat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPlan {
    pub links: Vec<ExchangeLink>,
    /// Set when some pair could only be linked in one direction, or when the
    /// plan was deliberately built that way.
    #[serde(default)]
    pub one_way: bool,
    /// Filled in by `build_fused`; absent in a freshly proposed plan.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
}

impl FusionPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Number of A→B and B→A links.
    pub fn directions(&self) -> (usize, usize) {
        let ab = self.links.iter().filter(|l| l.source.model == Side::A).count();
        (ab, self.links.len() - ab)
    }

    pub fn adapter_param_count(&self) -> usize {
        self.links.iter().map(|l| l.adapter.param_count()).sum()
    }

    /// Structural checks against the two networks: taps exist with the
    /// recorded shapes, links cross models, adapters land on the target
    /// shape, and both directions are present unless the plan is one-way.
    pub fn validate<T: Scalar>(&self, a: &NetworkGraph<T>, b: &NetworkGraph<T>) -> Result<(), FusionError> {
        if self.links.is_empty() {
            return Err(FusionError::Plan("plan has no links".into()));
        }
        let lookup = |p: &TapPoint| {
            let net = match p.model {
                Side::A => a,
                Side::B => b,
            };
            let tap = net
                .tap(&p.tap)
                .ok_or_else(|| FusionError::Plan(format!("model {} has no tap `{}`", p.model, p.tap)))?;
            if tap.shape != p.shape {
                return Err(FusionError::Plan(format!(
                    "tap `{}` of model {} has shape {}, plan says {}",
                    p.tap, p.model, tap.shape, p.shape
                )));
            }
            Ok(tap.node)
        };
        for (i, l) in self.links.iter().enumerate() {
            if l.source.model == l.target.model {
                return Err(FusionError::Plan(format!("link {i} stays inside model {}", l.source.model)));
            }
            lookup(&l.source)?;
            lookup(&l.target)?;
            if l.adapter.in_channels != l.source.shape.channels {
                return Err(FusionError::Plan(format!("link {i}: adapter input channels do not match the source")));
            }
            let out =
                l.adapter.output_shape(l.source.shape).map_err(|e| FusionError::Plan(format!("link {i}: {e}")))?;
            if out != l.target.shape {
                return Err(FusionError::Plan(format!(
                    "link {i}: adapter maps {} to {out}, target is {}",
                    l.source.shape, l.target.shape
                )));
            }
        }
        let (ab, ba) = self.directions();
        if !self.one_way && (ab == 0 || ba == 0) {
            return Err(FusionError::Plan("plan links only one direction but is not marked one-way".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    i: usize,
    j: usize,
    exact: bool,
    spatial: f64,
    depth_gap: f64,
}

fn spatial_distance(a: FeatureShape, b: FeatureShape) -> f64 {
    let r = |x: usize, y: usize| (x as f64 / y as f64).ln().abs();
    r(a.height, b.height) + r(a.width, b.width)
}

/// Greedy, depth-monotone pairing of two tap ladders.
///
/// Every pair `(i, j)` that can be adapted in at least one direction is a
/// candidate. Candidates are ranked by exact spatial match first, then
/// spatial distance, then relative-depth gap, then position. Walking that
/// ranking, a pair is taken when neither tap is used yet and it does not
/// cross an earlier pick (so depth order is preserved on both sides), until
/// `max_links` pairs are chosen. Each pair yields an A→B and a B→A link
/// where the adapter solver allows; pairs missing a direction mark the plan
/// one-way.
pub fn propose_pairing(taps_a: &[TapPoint], taps_b: &[TapPoint], max_links: usize) -> Result<FusionPlan, FusionError> {
    if taps_a.is_empty() || taps_b.is_empty() {
        return Err(FusionError::Plan("both models need at least one tap".into()));
    }
    if max_links == 0 {
        return Err(FusionError::Plan("max_links must be at least 1".into()));
    }
    let mut cands = Vec::new();
    for (i, ta) in taps_a.iter().enumerate() {
        for (j, tb) in taps_b.iter().enumerate() {
            let fwd = make_adapter(ta.shape, tb.shape).is_ok();
            let bwd = make_adapter(tb.shape, ta.shape).is_ok();
            if fwd || bwd {
                cands.push(Candidate {
                    i,
                    j,
                    exact: ta.shape.same_spatial(&tb.shape),
                    spatial: spatial_distance(ta.shape, tb.shape),
                    depth_gap: (ta.relative_depth() - tb.relative_depth()).abs(),
                });
            }
        }
    }
    if cands.is_empty() {
        return Err(FusionError::NoPairing { ladder_a: describe_ladder(taps_a), ladder_b: describe_ladder(taps_b) });
    }
    cands.sort_by(|x, y| {
        (!x.exact)
            .cmp(&!y.exact)
            .then(x.spatial.total_cmp(&y.spatial))
            .then(x.depth_gap.total_cmp(&y.depth_gap))
            .then((x.i, x.j).cmp(&(y.i, y.j)))
    });

    let mut picked: Vec<(usize, usize)> = Vec::new();
    for c in &cands {
        if picked.len() == max_links {
            break;
        }
        let compatible = picked.iter().all(|&(i, j)| (c.i < i && c.j < j) || (c.i > i && c.j > j));
        if compatible {
            picked.push((c.i, c.j));
        }
    }
    picked.sort_unstable();

    let mut links = Vec::new();
    let mut one_way = false;
    for (i, j) in picked {
        let (ta, tb) = (&taps_a[i], &taps_b[j]);
        let mut emitted = 0;
        for (src, dst) in [(ta, tb), (tb, ta)] {
            match make_adapter(src.shape, dst.shape) {
                Ok(adapter) => {
                    links.push(ExchangeLink { source: src.clone(), target: dst.clone(), adapter });
                    emitted += 1;
                }
                Err(e) => log::warn!("dropping link {}:{} → {}:{}: {e}", src.model, src.tap, dst.model, dst.tap),
            }
        }
        one_way |= emitted < 2;
    }
    Ok(FusionPlan { links, one_way, head: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ladder(model: Side, shapes: &[(usize, usize, usize)]) -> Vec<TapPoint> {
        shapes
            .iter()
            .enumerate()
            .map(|(d, &(h, w, c))| TapPoint {
                model,
                tap: format!("t{d}"),
                shape: FeatureShape::new(h, w, c),
                depth: d,
                total: shapes.len(),
            })
            .collect()
    }

    #[test]
    fn one_way_when_upsampling_is_needed() {
        let a = ladder(Side::A, &[(100, 100, 8)]);
        let b = ladder(Side::B, &[(25, 25, 8)]);
        let plan = propose_pairing(&a, &b, 1).unwrap();
        assert!(plan.one_way);
        assert_eq!(plan.links.len(), 1);
        let l = &plan.links[0];
        assert_eq!(l.source.model, Side::A);
        assert_eq!((l.adapter.kernel_size, l.adapter.stride, l.adapter.padding), (4, 4, 0));
    }

    #[test]
    fn no_pairing_lists_ladders() {
        let a = ladder(Side::A, &[(100, 100, 8)]);
        let b = ladder(Side::B, &[(7, 7, 8)]);
        let err = propose_pairing(&a, &b, 1).unwrap_err().to_string();
        assert!(err.contains("100×100×8") && err.contains("7×7×8"), "{err}");
    }

    #[test]
    fn plan_json_round_trip() {
        let a = ladder(Side::A, &[(28, 28, 8), (14, 14, 16)]);
        let b = ladder(Side::B, &[(28, 28, 4), (14, 14, 32)]);
        let plan = propose_pairing(&a, &b, 2).unwrap();
        let back = FusionPlan::from_json(&plan.to_json()).unwrap();
        assert_eq!(back, plan);
    }
}
