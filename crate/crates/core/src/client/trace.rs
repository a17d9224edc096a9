//! Attention/gradient traces exported by a model server.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// Half-open token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, i: usize) -> bool {
        self.start <= i && i < self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[layer][head][row][col]`
pub type Tensor4 = Vec<Vec<Vec<Vec<f64>>>>;

pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceBundle {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub attention: Tensor4,
    pub grad: Tensor4,
    pub label_positions: Vec<usize>,
    pub target_position: usize,
    pub image_span: Span,
}

impl TraceBundle {
    pub fn from_json(text: &str) -> Result<Self> {
        let bundle: TraceBundle =
            serde_json::from_str(text).map_err(|e| Error::InvalidTrace(e.to_string()))?;
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTrace(msg));
        if self.num_layers == 0 || self.num_heads == 0 || self.seq_len == 0 {
            return bad("num_layers, num_heads and seq_len must be positive".into());
        }
        check_shape("attention", &self.attention, self)?;
        check_shape("grad", &self.grad, self)?;

        for (l, layer) in self.attention.iter().enumerate() {
            for (h, head) in layer.iter().enumerate() {
                for (i, row) in head.iter().enumerate() {
                    let mut sum = 0.0;
                    for (j, &a) in row.iter().enumerate() {
                        if !a.is_finite() || a < 0.0 {
                            return bad(format!("attention[{l}][{h}][{i}][{j}] = {a}"));
                        }
                        if j > i && a != 0.0 {
                            return bad(format!(
                                "attention[{l}][{h}][{i}][{j}] is non-zero above the diagonal"
                            ));
                        }
                        sum += a;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return bad(format!("attention[{l}][{h}][{i}] sums to {sum}"));
                    }
                }
            }
        }
        if self
            .grad
            .iter()
            .flatten()
            .flatten()
            .flatten()
            .any(|g| !g.is_finite())
        {
            return bad("grad contains a non-finite value".into());
        }

        let n = self.seq_len;
        if self.target_position >= n {
            return bad(format!(
                "target_position {} >= seq_len {n}",
                self.target_position
            ));
        }
        if self.image_span.start > self.image_span.end || self.image_span.end > n {
            return bad(format!("image_span {:?} out of range", self.image_span));
        }
        let mut seen = vec![false; n];
        for &p in &self.label_positions {
            if p >= n {
                return bad(format!("label position {p} >= seq_len {n}"));
            }
            if std::mem::replace(&mut seen[p], true) {
                return bad(format!("label position {p} repeated"));
            }
        }
        if seen[self.target_position] {
            return bad("target_position overlaps a label position".into());
        }
        if self.image_span.contains(self.target_position) {
            return bad("target_position lies inside image_span".into());
        }
        if let Some(p) = self
            .label_positions
            .iter()
            .find(|&&p| self.image_span.contains(p))
        {
            return bad(format!("label position {p} lies inside image_span"));
        }
        Ok(())
    }
}

fn check_shape(name: &str, t: &Tensor4, b: &TraceBundle) -> Result<()> {
    let ok = t.len() == b.num_layers
        && t.iter().all(|layer| {
            layer.len() == b.num_heads
                && layer.iter().all(|head| {
                    head.len() == b.seq_len && head.iter().all(|row| row.len() == b.seq_len)
                })
        });
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidTrace(format!(
            "{name} shape differs from [{}][{}][{}][{}]",
            b.num_layers, b.num_heads, b.seq_len, b.seq_len
        )))
    }
}

/// Token annotations for a synthetic trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceLayout {
    pub seq_len: usize,
    pub label_positions: Vec<usize>,
    pub target_position: usize,
    pub image_span: Span,
}

impl TraceLayout {
    /// A plausible layout for `seq_len` tokens: a short image span near the
    /// start, label words spread through the middle, the target last.
    pub fn spread(seq_len: usize) -> Self {
        assert!(seq_len >= 4, "spread layout needs at least 4 tokens");
        let image_len = (seq_len / 6).max(1);
        let image_span = Span::new(1, 1 + image_len);
        let target_position = seq_len - 1;
        let first = image_span.end + 1;
        let label_positions = (first..target_position).step_by(3).collect();
        Self {
            seq_len,
            label_positions,
            target_position,
            image_span,
        }
    }
}

/// Seeded random bundle: causal softmax attention, gradients uniform in
/// [-1, 1] on and below the diagonal.
pub fn synthetic_trace(
    seed: u64,
    layers: usize,
    heads: usize,
    layout: &TraceLayout,
) -> TraceBundle {
    let mut rng = SplitMix64::new(seed);
    let n = layout.seq_len;
    let mut attention = Vec::with_capacity(layers);
    let mut grad = Vec::with_capacity(layers);
    for _ in 0..layers {
        let mut a_layer = Vec::with_capacity(heads);
        let mut g_layer = Vec::with_capacity(heads);
        for _ in 0..heads {
            let mut a_head = vec![vec![0.0; n]; n];
            let mut g_head = vec![vec![0.0; n]; n];
            for i in 0..n {
                let logits: Vec<f64> = (0..=i).map(|_| rng.next_f64() * 4.0 - 2.0).collect();
                let max = logits.iter().cloned().fold(f64::MIN, f64::max);
                let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..=i {
                    a_head[i][j] = exps[j] / z;
                    g_head[i][j] = rng.next_f64() * 2.0 - 1.0;
                }
            }
            a_layer.push(a_head);
            g_layer.push(g_head);
        }
        attention.push(a_layer);
        grad.push(g_layer);
    }
    TraceBundle {
        num_layers: layers,
        num_heads: heads,
        seq_len: n,
        attention,
        grad,
        label_positions: layout.label_positions.clone(),
        target_position: layout.target_position,
        image_span: layout.image_span,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> TraceBundle {
        synthetic_trace(11, 3, 2, &TraceLayout::spread(12))
    }

    #[test]
    fn synthetic_bundle_is_valid() {
        let b = bundle();
        b.validate().unwrap();
        assert_eq!((b.num_layers, b.num_heads, b.seq_len), (3, 2, 12));
        assert_eq!(b.target_position, 11);
        assert_eq!(b.image_span, Span::new(1, 3));
        assert_eq!(b.label_positions, vec![4, 7, 10]);
    }

    #[test]
    fn same_seed_same_bundle() {
        assert_eq!(bundle(), bundle());
        assert_ne!(
            bundle(),
            synthetic_trace(12, 3, 2, &TraceLayout::spread(12))
        );
    }

    #[test]
    fn overlapping_annotations_are_rejected() {
        let mut b = bundle();
        b.label_positions.push(b.image_span.start);
        assert!(matches!(b.validate(), Err(Error::InvalidTrace(_))));

        let mut b = bundle();
        b.target_position = b.label_positions[0];
        assert!(b.validate().is_err());

        let mut b = bundle();
        b.label_positions.push(b.label_positions[0]);
        assert!(b.validate().is_err());
    }

    #[test]
    fn non_causal_or_unnormalized_rows_are_rejected() {
        let mut b = bundle();
        b.attention[0][0][2][5] = 0.1;
        assert!(b.validate().is_err());

        let mut b = bundle();
        b.attention[1][1][3][0] += 0.01;
        assert!(b.validate().is_err());

        let mut b = bundle();
        b.grad[0][0].pop();
        assert!(b.validate().is_err());
    }

    #[test]
    fn json_round_trip_revalidates() {
        let b = bundle();
        let text = serde_json::to_string(&b).unwrap();
        assert!(text.contains("\"image_span\":{\"start\":1,\"end\":3}"));
        let back = TraceBundle::from_json(&text).unwrap();
        assert_eq!(back, b);
    }
}
