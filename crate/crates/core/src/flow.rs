//! Information-flow analysis over attention traces.
//!
//! Each layer's saliency is `I(i, j) = Σ_h |A_h(i, j) · G_h(i, j)|`, the
//! elementwise product of attention and its gradient. The strict lower
//! triangle is split into four regions and each is summarized by its mean
//! saliency:
//!
//! * `wp`: into each label word `p` from every earlier token,
//! * `pq`: from each label word into the target `q`,
//! * `vq`: from the query image tokens into the target,
//! * `ww`: everything else.

use serde::{Deserialize, Serialize};

use crate::client::trace::{Span, TraceBundle};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMatrix {
    pub layer: usize,
    pub values: Vec<Vec<f64>>,
}

impl SaliencyMatrix {
    pub fn seq_len(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, (i, j): (usize, usize)) -> f64 {
        self.values[i][j]
    }
}

/// Saliency of one layer from its `[head][seq][seq]` attention and gradient.
pub fn saliency_matrix(
    layer: usize,
    attention: &[Vec<Vec<f64>>],
    grad: &[Vec<Vec<f64>>],
) -> Result<SaliencyMatrix> {
    let shape_err = |what: String| Error::InvalidTrace(format!("layer {layer}: {what}"));
    if attention.len() != grad.len() {
        return Err(shape_err(format!(
            "{} attention heads but {} gradient heads",
            attention.len(),
            grad.len()
        )));
    }
    let Some(first) = attention.first() else {
        return Err(shape_err("no heads".into()));
    };
    let n = first.len();
    let mut values = vec![vec![0.0; n]; n];
    for (h, (a, g)) in attention.iter().zip(grad).enumerate() {
        if a.len() != n || g.len() != n {
            return Err(shape_err(format!("head {h} is not {n}x{n}")));
        }
        for i in 0..n {
            if a[i].len() != n || g[i].len() != n {
                return Err(shape_err(format!("head {h} row {i} is not of length {n}")));
            }
            for j in 0..=i {
                values[i][j] += (a[i][j] * g[i][j]).abs();
            }
        }
    }
    Ok(SaliencyMatrix { layer, values })
}

/// The four cell sets of one trace layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSets {
    pub seq_len: usize,
    pub wp: Vec<(usize, usize)>,
    pub pq: Vec<(usize, usize)>,
    pub vq: Vec<(usize, usize)>,
    pub ww: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetSizes {
    pub wp: usize,
    pub pq: usize,
    pub vq: usize,
    pub ww: usize,
}

impl IndexSets {
    pub fn sizes(&self) -> SetSizes {
        SetSizes {
            wp: self.wp.len(),
            pq: self.pq.len(),
            vq: self.vq.len(),
            ww: self.ww.len(),
        }
    }
}

pub fn build_index_sets(
    label_positions: &[usize],
    target: usize,
    image_span: Span,
    seq_len: usize,
) -> Result<IndexSets> {
    let bad = |m: String| Error::InvalidTrace(m);
    if target >= seq_len {
        return Err(bad(format!(
            "target {target} outside sequence of {seq_len}"
        )));
    }
    if image_span.start > image_span.end || image_span.end > seq_len {
        return Err(bad(format!(
            "image span [{}, {}) outside sequence of {seq_len}",
            image_span.start, image_span.end
        )));
    }
    if image_span.contains(target) {
        return Err(bad("target lies inside the image span".into()));
    }
    if target < image_span.end {
        return Err(bad("target must come after the image span".into()));
    }
    let mut labels = label_positions.to_vec();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() != label_positions.len() {
        return Err(bad("duplicate label positions".into()));
    }
    for &p in &labels {
        if p >= target {
            return Err(bad(format!(
                "label position {p} is not before target {target}"
            )));
        }
        if image_span.contains(p) {
            return Err(bad(format!(
                "label position {p} lies inside the image span"
            )));
        }
    }

    let mut region = vec![vec![0u8; seq_len]; seq_len];
    let mut wp = Vec::new();
    for &p in label_positions {
        for j in 0..p {
            region[p][j] = 1;
            wp.push((p, j));
        }
    }
    let mut pq = Vec::new();
    for &p in label_positions {
        region[target][p] = 2;
        pq.push((target, p));
    }
    let mut vq = Vec::new();
    for v in image_span.start..image_span.end {
        region[target][v] = 3;
        vq.push((target, v));
    }
    let mut ww = Vec::new();
    for (i, row) in region.iter().enumerate() {
        for (j, &r) in row.iter().enumerate().take(i) {
            if r == 0 {
                ww.push((i, j));
            }
        }
    }
    Ok(IndexSets {
        seq_len,
        wp,
        pq,
        vq,
        ww,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowScores {
    pub layer: usize,
    pub s_wp: f64,
    pub s_pq: f64,
    pub s_vq: f64,
    pub s_ww: f64,
}

impl FlowScores {
    fn scaled(self, c: f64) -> Self {
        Self {
            s_wp: self.s_wp * c,
            s_pq: self.s_pq * c,
            s_vq: self.s_vq * c,
            s_ww: self.s_ww * c,
            ..self
        }
    }
}

fn set_mean(s: &SaliencyMatrix, cells: &[(usize, usize)]) -> f64 {
    if cells.is_empty() {
        return 0.0;
    }
    cells.iter().map(|&c| s.at(c)).sum::<f64>() / cells.len() as f64
}

pub fn flow_scores(saliency: &SaliencyMatrix, sets: &IndexSets) -> Result<FlowScores> {
    if saliency.seq_len() != sets.seq_len {
        return Err(Error::InvalidTrace(format!(
            "index sets are for {} tokens but saliency has {}",
            sets.seq_len,
            saliency.seq_len()
        )));
    }
    Ok(FlowScores {
        layer: saliency.layer,
        s_wp: set_mean(saliency, &sets.wp),
        s_pq: set_mean(saliency, &sets.pq),
        s_vq: set_mean(saliency, &sets.vq),
        s_ww: set_mean(saliency, &sets.ww),
    })
}

/// Per-layer scores of one trace plus the layout they were computed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFlow {
    pub num_heads: usize,
    pub set_sizes: SetSizes,
    pub layers: Vec<FlowScores>,
}

impl TraceFlow {
    /// The same curves with saliency averaged rather than summed over heads.
    pub fn head_averaged(&self) -> Vec<FlowScores> {
        let c = 1.0 / self.num_heads as f64;
        self.layers.iter().map(|s| s.scaled(c)).collect()
    }
}

pub fn analyze_trace(bundle: &TraceBundle) -> Result<TraceFlow> {
    bundle.validate()?;
    let sets = build_index_sets(
        &bundle.label_positions,
        bundle.target_position,
        bundle.image_span,
        bundle.seq_len,
    )?;
    let layers = bundle
        .attention
        .iter()
        .zip(&bundle.grad)
        .enumerate()
        .map(|(l, (a, g))| flow_scores(&saliency_matrix(l, a, g)?, &sets))
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceFlow {
        num_heads: bundle.num_heads,
        set_sizes: sets.sizes(),
        layers,
    })
}

/// Layer-wise mean of several traces' curves. All must have the same depth.
pub fn mean_flow(flows: &[TraceFlow]) -> Result<Vec<FlowScores>> {
    let Some(first) = flows.first() else {
        return Err(Error::InvalidArgument("no traces to average".into()));
    };
    let depth = first.layers.len();
    if let Some(f) = flows.iter().find(|f| f.layers.len() != depth) {
        return Err(Error::InvalidTrace(format!(
            "traces differ in depth: {depth} vs {} layers",
            f.layers.len()
        )));
    }
    let n = flows.len() as f64;
    Ok((0..depth)
        .map(|l| {
            let mut acc = FlowScores {
                layer: l,
                s_wp: 0.0,
                s_pq: 0.0,
                s_vq: 0.0,
                s_ww: 0.0,
            };
            for f in flows {
                let s = f.layers[l];
                acc.s_wp += s.s_wp;
                acc.s_pq += s.s_pq;
                acc.s_vq += s.s_vq;
                acc.s_ww += s.s_ww;
            }
            acc.scaled(1.0 / n)
        })
        .collect())
}

pub const FLOW_CSV_HEADER: &str = "layer,s_wp,s_pq,s_vq,s_ww";

pub fn flow_csv(scores: &[FlowScores]) -> String {
    let mut out = String::from(FLOW_CSV_HEADER);
    out.push('\n');
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.layer, s.s_wp, s.s_pq, s.s_vq, s.s_ww
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::trace::{synthetic_trace, TraceLayout};
    use proptest::prelude::*;

    fn fixture_sets() -> IndexSets {
        build_index_sets(&[2, 4], 5, Span::new(1, 2), 6).unwrap()
    }

    #[test]
    fn fixture_set_sizes() {
        let s = fixture_sets();
        assert_eq!(
            s.sizes(),
            SetSizes {
                wp: 6,
                pq: 2,
                vq: 1,
                ww: 6
            }
        );
        let mut all: Vec<_> = [&s.wp, &s.pq, &s.vq, &s.ww]
            .into_iter()
            .flatten()
            .copied()
            .collect();
        all.sort_unstable();
        let tri: Vec<_> = (0..6).flat_map(|i| (0..i).map(move |j| (i, j))).collect();
        assert_eq!(all, tri);
    }

    #[test]
    fn no_label_words() {
        let s = build_index_sets(&[], 5, Span::new(1, 3), 6).unwrap();
        assert!(s.wp.is_empty() && s.pq.is_empty());
        assert_eq!(s.vq.len(), 2);
        assert_eq!(s.ww.len(), 15 - 2);
    }

    #[test]
    fn precondition_violations() {
        // Target before a label word.
        assert!(build_index_sets(&[2, 4], 3, Span::new(0, 1), 6).is_err());
        assert!(build_index_sets(&[2], 6, Span::new(0, 1), 6).is_err());
        assert!(build_index_sets(&[1], 5, Span::new(1, 2), 6).is_err());
        assert!(build_index_sets(&[2, 2], 5, Span::new(0, 1), 6).is_err());
        assert!(build_index_sets(&[2], 5, Span::new(4, 7), 6).is_err());
    }

    fn one_head(values: Vec<Vec<f64>>) -> Vec<Vec<Vec<f64>>> {
        vec![values]
    }

    #[test]
    fn saliency_examples() {
        let a = one_head(vec![vec![1.0, 0.0], vec![0.5, 0.5]]);
        let zero = one_head(vec![vec![0.0; 2]; 2]);
        let s = saliency_matrix(0, &a, &zero).unwrap();
        assert!(s.values.iter().flatten().all(|&x| x == 0.0));

        let mut g = vec![vec![0.0; 2]; 2];
        g[1][0] = -2.0;
        let s = saliency_matrix(0, &a, &one_head(g)).unwrap();
        assert_eq!(s.values[1][0], 1.0);

        let short = one_head(vec![vec![0.0; 2]; 3]);
        assert!(saliency_matrix(0, &a, &short).is_err());
        assert!(saliency_matrix(0, &a, &[]).is_err());
    }

    #[test]
    fn fixture_scores_match_direct_means() {
        let sal = SaliencyMatrix {
            layer: 0,
            values: (0..6)
                .map(|i| (0..6).map(|j| (i + j) as f64).collect())
                .collect(),
        };
        let f = flow_scores(&sal, &fixture_sets()).unwrap();
        // wp: (2,0),(2,1),(4,0..4) -> 2+3+4+5+6+7 = 27 over 6.
        assert_eq!(f.s_wp, 27.0 / 6.0);
        // pq: (5,2),(5,4) -> 7+9 over 2.
        assert_eq!(f.s_pq, 8.0);
        // vq: (5,1) -> 6.
        assert_eq!(f.s_vq, 6.0);
        // ww: (1,0),(3,0),(3,1),(3,2),(5,0),(5,3) -> 1+3+4+5+5+8 = 26 over 6.
        assert_eq!(f.s_ww, 26.0 / 6.0);

        let ones = SaliencyMatrix {
            layer: 0,
            values: vec![vec![1.0; 6]; 6],
        };
        let f = flow_scores(&ones, &fixture_sets()).unwrap();
        assert_eq!((f.s_wp, f.s_pq, f.s_vq, f.s_ww), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn analyze_emits_one_row_per_layer() {
        let layout = TraceLayout::spread(12);
        let b = synthetic_trace(3, 3, 2, &layout);
        let flow = analyze_trace(&b).unwrap();
        assert_eq!(flow.layers.len(), 3);
        let csv = flow_csv(&flow.layers);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("layer,s_wp,s_pq,s_vq,s_ww\n0,"));
        let avg = flow.head_averaged();
        assert!((avg[0].s_ww * 2.0 - flow.layers[0].s_ww).abs() < 1e-15);
        let mean = mean_flow(&[flow.clone(), flow.clone()]).unwrap();
        assert!((mean[1].s_pq - flow.layers[1].s_pq).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scaling_grads_scales_scores(seed in any::<u64>(), c in 0.0f64..10.0) {
            let layout = TraceLayout::spread(12);
            let b = synthetic_trace(seed, 2, 2, &layout);
            let mut scaled = b.clone();
            for x in scaled.grad.iter_mut().flatten().flatten().flatten() {
                *x *= c;
            }
            let f0 = analyze_trace(&b).unwrap();
            let f1 = analyze_trace(&scaled).unwrap();
            for (a, s) in f0.layers.iter().zip(&f1.layers) {
                for (x, y) in [(a.s_wp, s.s_wp), (a.s_pq, s.s_pq), (a.s_vq, s.s_vq), (a.s_ww, s.s_ww)] {
                    prop_assert!((x * c - y).abs() <= 1e-9 * (1.0 + y.abs()));
                }
            }
        }

        #[test]
        fn head_order_does_not_matter(seed in any::<u64>()) {
            let layout = TraceLayout::spread(10);
            let b = synthetic_trace(seed, 1, 3, &layout);
            let mut a = b.attention[0].clone();
            let mut g = b.grad[0].clone();
            let s0 = saliency_matrix(0, &a, &g).unwrap();
            a.reverse();
            g.reverse();
            let s1 = saliency_matrix(0, &a, &g).unwrap();
            for (r0, r1) in s0.values.iter().zip(&s1.values) {
                for (x, y) in r0.iter().zip(r1) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }
}
