//! Forward evaluation and tape-based reverse-mode gradients for the point
//! network.
//!
//! The forward pass records everything backward needs (weight copies,
//! sublayer activations, dropout masks, pooling winners, gather indices)
//! into a [`Tape`], so gradients are always consistent with the exact
//! forward computation, dropout masks included. Center selection and
//! neighbor ordering are canonicalized on point values (not input order):
//! farthest-point sampling starts from a coordinate-hash argmin and all
//! ties break on lexicographic coordinates, which makes the 27 outputs
//! invariant under permutation of the input points.

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::params::{NetworkParameters, ParamLayout, SegmentKind};
use super::{GaussianPrediction, NetError, NetworkConfig};
use crate::pointcloud::{FilteredPair, SpatialIndex};
use crate::seeding::rng_from_seed;

// ---------------------------------------------------------------------
// Plan: layer shapes and parameter segments derived from a config.
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
pub(crate) struct MlpPlan {
    pub name: String,
    pub in_dim: usize,
    pub hidden: Vec<usize>,
    pub final_linear: Option<usize>,
}

impl MlpPlan {
    fn out_dim(&self) -> usize {
        self.final_linear
            .or_else(|| self.hidden.last().copied())
            .unwrap_or(self.in_dim)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct SegmentDecl {
    pub name: String,
    pub len: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub kind: DeclKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum DeclKind {
    Weight,
    ZeroInitWeight,
    Bias,
    AffineScale,
    AffineShift,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvPlan {
    pub radius: f64,
    pub sample_rate: f64,
    pub mlp: MlpPlan,
}

#[derive(Clone, Debug)]
pub(crate) struct UpconvPlan {
    pub radius: f64,
    pub group: MlpPlan,
    pub post: MlpPlan,
}

#[derive(Clone, Debug)]
pub(crate) struct GraphPlan {
    pub pre: Vec<ConvPlan>,
    pub fe_k: usize,
    pub fe: MlpPlan,
    pub post: Vec<ConvPlan>,
    pub up: Vec<UpconvPlan>,
    pub regression: MlpPlan,
    pub head: MlpPlan,
    pub max_group: usize,
    pub pair_size: usize,
    pub dropout_rate: f64,
    decls: Vec<SegmentDecl>,
}

impl GraphPlan {
    pub fn param_segments(&self) -> impl Iterator<Item = (String, usize)> + '_ {
        self.decls.iter().map(|d| (d.name.clone(), d.len))
    }

    pub fn segment_kind(&self, name: &str) -> SegmentKind {
        let d = self.decls.iter().find(|d| d.name == name).expect("segment exists");
        match d.kind {
            DeclKind::Weight => SegmentKind::Weight { fan_in: d.fan_in, fan_out: d.fan_out, zero_init: false },
            DeclKind::ZeroInitWeight => SegmentKind::Weight { fan_in: d.fan_in, fan_out: d.fan_out, zero_init: true },
            DeclKind::Bias => SegmentKind::Bias,
            DeclKind::AffineScale => SegmentKind::AffineScale,
            DeclKind::AffineShift => SegmentKind::AffineShift,
        }
    }
}

fn mlp_plan(cfg: &NetworkConfig, name: &str, in_dim: usize, widths: &[usize], final_linear: Option<usize>) -> MlpPlan {
    MlpPlan {
        name: name.to_string(),
        in_dim,
        hidden: widths.iter().map(|&w| cfg.scaled_width(w)).collect(),
        final_linear,
    }
}

fn declare_mlp(plan: &MlpPlan, zero_final: bool, decls: &mut Vec<SegmentDecl>) {
    let mut d_in = plan.in_dim;
    for (i, &width) in plan.hidden.iter().enumerate() {
        let base = format!("{}.lin{}", plan.name, i);
        decls.push(SegmentDecl { name: format!("{base}.w"), len: width * d_in, fan_in: d_in, fan_out: width, kind: DeclKind::Weight });
        decls.push(SegmentDecl { name: format!("{base}.b"), len: width, fan_in: d_in, fan_out: width, kind: DeclKind::Bias });
        decls.push(SegmentDecl { name: format!("{base}.g"), len: width, fan_in: d_in, fan_out: width, kind: DeclKind::AffineScale });
        decls.push(SegmentDecl { name: format!("{base}.beta"), len: width, fan_in: d_in, fan_out: width, kind: DeclKind::AffineShift });
        d_in = width;
    }
    if let Some(out) = plan.final_linear {
        let kind = if zero_final { DeclKind::ZeroInitWeight } else { DeclKind::Weight };
        decls.push(SegmentDecl { name: format!("{}.out.w", plan.name), len: out * d_in, fan_in: d_in, fan_out: out, kind });
        decls.push(SegmentDecl { name: format!("{}.out.b", plan.name), len: out, fan_in: d_in, fan_out: out, kind: DeclKind::Bias });
    }
}

pub(crate) fn build_plan(cfg: &NetworkConfig) -> Result<GraphPlan, NetError> {
    cfg.validate()?;
    let mut decls = Vec::new();
    let mut channels = 0usize;
    let mut pre = Vec::new();
    for (i, spec) in cfg.set_conv_pre.iter().enumerate() {
        let plan = mlp_plan(cfg, &format!("pre{i}"), 3 + channels, &spec.mlp, None);
        channels = plan.out_dim();
        declare_mlp(&plan, false, &mut decls);
        pre.push(ConvPlan { radius: spec.radius, sample_rate: spec.sample_rate, mlp: plan });
    }
    let fe = mlp_plan(cfg, "fe", channels * 2 + 3, &cfg.flow_embedding.mlp, None);
    channels = fe.out_dim();
    declare_mlp(&fe, false, &mut decls);
    let mut post = Vec::new();
    for (i, spec) in cfg.set_conv_post.iter().enumerate() {
        let plan = mlp_plan(cfg, &format!("post{i}"), 3 + channels, &spec.mlp, None);
        channels = plan.out_dim();
        declare_mlp(&plan, false, &mut decls);
        post.push(ConvPlan { radius: spec.radius, sample_rate: spec.sample_rate, mlp: plan });
    }

    // Feature dims of the levels an upconv will land on, deepest last.
    // Each downsampling conv records the features present at its *input*
    // level at the time it ran; the flow embedding replaces the feature
    // dim of its level.
    let mut skip_dims: Vec<usize> = Vec::new();
    {
        let mut c = 0usize;
        for (i, spec) in cfg.set_conv_pre.iter().enumerate() {
            let plan = &pre[i].mlp;
            if spec.sample_rate < 1.0 {
                skip_dims.push(c);
            }
            c = plan.out_dim();
        }
        c = fe.out_dim();
        for (i, spec) in cfg.set_conv_post.iter().enumerate() {
            let plan = &post[i].mlp;
            if spec.sample_rate < 1.0 {
                skip_dims.push(c);
            }
            c = plan.out_dim();
        }
    }

    let mut up = Vec::new();
    for (i, spec) in cfg.set_upconv.iter().enumerate() {
        let skip_dim = skip_dims[skip_dims.len() - 1 - i];
        let group = mlp_plan(cfg, &format!("up{i}.group"), 3 + channels, &spec.mlp, None);
        let pooled = group.out_dim();
        let post_plan = mlp_plan(cfg, &format!("up{i}.post"), pooled + skip_dim, &spec.post_mlp, None);
        channels = post_plan.out_dim();
        declare_mlp(&group, false, &mut decls);
        declare_mlp(&post_plan, false, &mut decls);
        up.push(UpconvPlan { radius: spec.radius, group, post: post_plan });
    }

    let regression = mlp_plan(cfg, "regress", channels, &cfg.regression_mlp, Some(3));
    declare_mlp(&regression, false, &mut decls);
    let head = mlp_plan(cfg, "head", 3, &cfg.head_mlp, Some(27));
    declare_mlp(&head, true, &mut decls);

    Ok(GraphPlan {
        pre,
        fe_k: cfg.flow_embedding.k,
        fe,
        post,
        up,
        regression,
        head,
        max_group: cfg.max_group_size,
        pair_size: cfg.pair_size,
        dropout_rate: cfg.dropout_rate,
        decls,
    })
}

// ---------------------------------------------------------------------
// Canonical, permutation-invariant sampling and grouping.
// ---------------------------------------------------------------------

fn coord_hash(p: &Vector3<f64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for i in 0..3 {
        for b in p[i].to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn lex_less(a: &Vector3<f64>, b: &Vector3<f64>) -> bool {
    for i in 0..3 {
        match a[i].total_cmp(&b[i]) {
            std::cmp::Ordering::Less => return true,
            std::cmp::Ordering::Greater => return false,
            std::cmp::Ordering::Equal => {}
        }
    }
    false
}

/// Farthest-point sampling seeded from a coordinate hash so the selection
/// depends on point values only, never on input order.
fn canonical_fps(points: &[Vector3<f64>], size: usize) -> Vec<usize> {
    debug_assert!(size >= 1 && size <= points.len());
    let start = (0..points.len())
        .min_by(|&a, &b| {
            coord_hash(&points[a])
                .cmp(&coord_hash(&points[b]))
                .then_with(|| {
                    if lex_less(&points[a], &points[b]) {
                        std::cmp::Ordering::Less
                    } else if lex_less(&points[b], &points[a]) {
                        std::cmp::Ordering::Greater
                    } else {
                        std::cmp::Ordering::Equal
                    }
                })
        })
        .unwrap();
    let mut selected = vec![start];
    let mut taken = vec![false; points.len()];
    taken[start] = true;
    let mut min_dist: Vec<f64> =
        points.iter().map(|p| (p - points[start]).norm_squared()).collect();
    while selected.len() < size {
        // Farthest-from-selected wins; exact distance ties go to the
        // lexicographically smaller point.
        let mut best: Option<usize> = None;
        for i in 0..points.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    if min_dist[i] > min_dist[b]
                        || (min_dist[i] == min_dist[b] && lex_less(&points[i], &points[b]))
                    {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        let best = best.expect("size <= point count");
        taken[best] = true;
        selected.push(best);
        for (i, d) in min_dist.iter_mut().enumerate() {
            let nd = (points[i] - points[best]).norm_squared();
            if nd < *d {
                *d = nd;
            }
        }
    }
    selected
}

/// Neighbor indices within `radius` of `center`, nearest first with
/// lexicographic tie-breaking, truncated to `cap`.
fn canonical_radius_group(
    index: &SpatialIndex,
    points: &[Vector3<f64>],
    center: &Vector3<f64>,
    radius: f64,
    cap: usize,
) -> Vec<usize> {
    let mut hood = index.within_radius(center, radius);
    hood.sort_by(|a, b| {
        a.distance.total_cmp(&b.distance).then_with(|| {
            if lex_less(&points[a.index], &points[b.index]) {
                std::cmp::Ordering::Less
            } else if lex_less(&points[b.index], &points[a.index]) {
                std::cmp::Ordering::Greater
            } else {
                a.index.cmp(&b.index)
            }
        })
    });
    hood.truncate(cap);
    hood.into_iter().map(|n| n.index).collect()
}

fn canonical_knn(
    index: &SpatialIndex,
    points: &[Vector3<f64>],
    query: &Vector3<f64>,
    k: usize,
) -> Vec<usize> {
    let mut hood = index.knn(query, k);
    hood.sort_by(|a, b| {
        a.distance.total_cmp(&b.distance).then_with(|| {
            if lex_less(&points[a.index], &points[b.index]) {
                std::cmp::Ordering::Less
            } else if lex_less(&points[b.index], &points[a.index]) {
                std::cmp::Ordering::Greater
            } else {
                a.index.cmp(&b.index)
            }
        })
    });
    hood.into_iter().map(|n| n.index).collect()
}

// ---------------------------------------------------------------------
// MLP with tape records.
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
struct SubRecord {
    w: DMatrix<f64>,
    g: DVector<f64>,
    input: DMatrix<f64>,
    z: DMatrix<f64>,
    mask: Option<DMatrix<f64>>,
    output: DMatrix<f64>,
    w_off: usize,
    b_off: usize,
    g_off: usize,
    beta_off: usize,
}

#[derive(Clone, Debug)]
struct FinRecord {
    w: DMatrix<f64>,
    input: DMatrix<f64>,
    w_off: usize,
    b_off: usize,
}

#[derive(Clone, Debug, Default)]
struct MlpRecord {
    subs: Vec<SubRecord>,
    fin: Option<FinRecord>,
}

struct Runner<'a> {
    layout: &'a ParamLayout,
    params: &'a [f64],
    dropout: Option<(ChaCha12Rng, f64)>,
    record: bool,
    steps: Vec<Step>,
    values: Vec<DMatrix<f64>>,
}

impl<'a> Runner<'a> {
    fn seg(&self, name: &str) -> (usize, usize) {
        let s = self.layout.segment(name).expect("segment in layout");
        (s.offset, s.len)
    }

    fn weight(&self, name: &str, rows: usize, cols: usize) -> (DMatrix<f64>, usize) {
        let (off, len) = self.seg(name);
        debug_assert_eq!(len, rows * cols);
        let m = DMatrix::from_row_slice(rows, cols, &self.params[off..off + len]);
        (m, off)
    }

    fn vector(&self, name: &str, len: usize) -> (DVector<f64>, usize) {
        let (off, l) = self.seg(name);
        debug_assert_eq!(l, len);
        (DVector::from_row_slice(&self.params[off..off + len]), off)
    }

    fn new_tensor(&mut self, m: DMatrix<f64>) -> usize {
        self.values.push(m);
        self.values.len() - 1
    }

    /// Applies `plan` to a row matrix; optionally records the tape.
    fn mlp(&mut self, plan: &MlpPlan, x: DMatrix<f64>) -> (DMatrix<f64>, MlpRecord) {
        let mut record = MlpRecord::default();
        let mut cur = x;
        let mut d_in = plan.in_dim;
        debug_assert_eq!(cur.ncols(), d_in);
        for (i, &width) in plan.hidden.iter().enumerate() {
            let base = format!("{}.lin{}", plan.name, i);
            let (w, w_off) = self.weight(&format!("{base}.w"), width, d_in);
            let (b, b_off) = self.vector(&format!("{base}.b"), width);
            let (g, g_off) = self.vector(&format!("{base}.g"), width);
            let (beta, beta_off) = self.vector(&format!("{base}.beta"), width);
            let mut z = &cur * w.transpose();
            for mut row in z.row_iter_mut() {
                row += b.transpose();
            }
            // Per-feature affine in place of batch norm, then ReLU.
            let mut u = z.clone();
            for mut row in u.row_iter_mut() {
                row.component_mul_assign(&g.transpose());
                row += beta.transpose();
            }
            let mut a = u.map(|v| v.max(0.0));
            let mask = if let Some((rng, rate)) = self.dropout.as_mut() {
                let keep = 1.0 - *rate;
                let m = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                    if rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                });
                a.component_mul_assign(&m);
                Some(m)
            } else {
                None
            };
            if self.record {
                record.subs.push(SubRecord {
                    w,
                    g,
                    input: cur.clone(),
                    z,
                    mask,
                    output: a.clone(),
                    w_off,
                    b_off,
                    g_off,
                    beta_off,
                });
            }
            cur = a;
            d_in = width;
        }
        if let Some(out_dim) = plan.final_linear {
            let (w, w_off) = self.weight(&format!("{}.out.w", plan.name), out_dim, d_in);
            let (b, b_off) = self.vector(&format!("{}.out.b", plan.name), out_dim);
            let mut y = &cur * w.transpose();
            for mut row in y.row_iter_mut() {
                row += b.transpose();
            }
            if self.record {
                record.fin = Some(FinRecord { w, input: cur.clone(), w_off, b_off });
            }
            cur = y;
        }
        (cur, record)
    }
}

fn mlp_backward(record: &MlpRecord, grad_out: DMatrix<f64>, grads: &mut [f64]) -> DMatrix<f64> {
    let mut grad = grad_out;
    if let Some(fin) = &record.fin {
        let dw = grad.transpose() * &fin.input;
        accumulate(grads, fin.w_off, dw.transpose().as_slice());
        for c in 0..grad.ncols() {
            let mut s = 0.0;
            for r in 0..grad.nrows() {
                s += grad[(r, c)];
            }
            grads[fin.b_off + c] += s;
        }
        grad = &grad * &fin.w;
    }
    for sub in record.subs.iter().rev() {
        if let Some(mask) = &sub.mask {
            grad.component_mul_assign(mask);
        }
        // ReLU gate: post-activation output is positive exactly where the
        // pre-activation was (masked entries already have zero gradient).
        for (g, o) in grad.iter_mut().zip(sub.output.iter()) {
            if *o <= 0.0 {
                *g = 0.0;
            }
        }
        // Affine: dbeta = column sums, dg = column sums of grad .* z.
        for c in 0..grad.ncols() {
            let mut dbeta = 0.0;
            let mut dg = 0.0;
            for r in 0..grad.nrows() {
                dbeta += grad[(r, c)];
                dg += grad[(r, c)] * sub.z[(r, c)];
            }
            grads[sub.beta_off + c] += dbeta;
            grads[sub.g_off + c] += dg;
        }
        for mut row in grad.row_iter_mut() {
            row.component_mul_assign(&sub.g.transpose());
        }
        // Linear: dW = dz^T x, db = column sums, dx = dz W.
        let dw = grad.transpose() * &sub.input;
        accumulate(grads, sub.w_off, dw.transpose().as_slice());
        for c in 0..grad.ncols() {
            let mut s = 0.0;
            for r in 0..grad.nrows() {
                s += grad[(r, c)];
            }
            grads[sub.b_off + c] += s;
        }
        grad = &grad * &sub.w;
    }
    grad
}

/// nalgebra stores matrices column-major; weight segments are row-major
/// (out x in), so gradients transpose through `as_slice` on the flipped
/// matrix.
fn accumulate(grads: &mut [f64], offset: usize, values: &[f64]) {
    for (g, v) in grads[offset..offset + values.len()].iter_mut().zip(values) {
        *g += v;
    }
}

// ---------------------------------------------------------------------
// Pooling.
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
struct PoolRecord {
    /// Winning row per (group, channel), -1 for empty groups.
    argmax: Vec<i64>,
    channels: usize,
}

fn max_pool(rows: &DMatrix<f64>, offsets: &[usize]) -> (DMatrix<f64>, PoolRecord) {
    let groups = offsets.len() - 1;
    let channels = rows.ncols();
    let mut out = DMatrix::zeros(groups, channels);
    let mut argmax = vec![-1i64; groups * channels];
    for g in 0..groups {
        let (lo, hi) = (offsets[g], offsets[g + 1]);
        if lo == hi {
            continue;
        }
        for c in 0..channels {
            let mut best_row = lo;
            let mut best = rows[(lo, c)];
            for r in lo + 1..hi {
                if rows[(r, c)] > best {
                    best = rows[(r, c)];
                    best_row = r;
                }
            }
            out[(g, c)] = best;
            argmax[g * channels + c] = best_row as i64;
        }
    }
    (out, PoolRecord { argmax, channels })
}

fn max_pool_backward(pool: &PoolRecord, grad_out: &DMatrix<f64>, rows: usize) -> DMatrix<f64> {
    let mut grad_rows = DMatrix::zeros(rows, pool.channels);
    for g in 0..grad_out.nrows() {
        for c in 0..pool.channels {
            let r = pool.argmax[g * pool.channels + c];
            if r >= 0 {
                grad_rows[(r as usize, c)] += grad_out[(g, c)];
            }
        }
    }
    grad_rows
}

// ---------------------------------------------------------------------
// Steps and the tape.
// ---------------------------------------------------------------------

#[derive(Clone, Debug)]
enum Step {
    SetConv {
        mlp: MlpRecord,
        pool: PoolRecord,
        row_src: Vec<u32>,
        in_feat_dim: usize,
        input: usize,
        output: usize,
    },
    FlowEmbed {
        mlp: MlpRecord,
        pool: PoolRecord,
        row_center: Vec<u32>,
        row_neighbor: Vec<u32>,
        c1: usize,
        c2: usize,
        in1: usize,
        in2: usize,
        output: usize,
    },
    SetUpconv {
        group_mlp: MlpRecord,
        pool: PoolRecord,
        row_src: Vec<u32>,
        c_coarse: usize,
        pooled_dim: usize,
        post_mlp: MlpRecord,
        coarse: usize,
        skip: usize,
        output: usize,
    },
    PerPoint {
        mlp: MlpRecord,
        input: usize,
        output: usize,
    },
    GlobalPool {
        pool: PoolRecord,
        rows: usize,
        input: usize,
        output: usize,
    },
}

/// Recorded forward computation; owns everything its backward pass needs.
pub struct Tape {
    steps: Vec<Step>,
    tensor_shapes: Vec<(usize, usize)>,
    total_params: usize,
    output: [f64; 27],
}

impl Tape {
    pub fn prediction(&self) -> GaussianPrediction {
        GaussianPrediction::from_outputs(&self.output)
    }

    pub fn outputs(&self) -> &[f64; 27] {
        &self.output
    }

    /// Concatenated pooling winners plus hashed ReLU activation patterns;
    /// identical signatures mean identical non-smooth routing. Gradient
    /// checks use this to detect finite-difference steps that cross a
    /// max-pool or ReLU switch.
    pub fn routing_signature(&self) -> Vec<i64> {
        let mut sig = Vec::new();
        let push_mlp = |sig: &mut Vec<i64>, rec: &MlpRecord| {
            for sub in &rec.subs {
                let mut h = 0xcbf2_9ce4_8422_2325u64;
                for v in sub.output.iter() {
                    h ^= u64::from(*v > 0.0);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                sig.push(h as i64);
            }
        };
        for step in &self.steps {
            match step {
                Step::SetConv { pool, mlp, .. } | Step::FlowEmbed { pool, mlp, .. } => {
                    push_mlp(&mut sig, mlp);
                    sig.extend_from_slice(&pool.argmax);
                }
                Step::SetUpconv { pool, group_mlp, post_mlp, .. } => {
                    push_mlp(&mut sig, group_mlp);
                    sig.extend_from_slice(&pool.argmax);
                    push_mlp(&mut sig, post_mlp);
                }
                Step::GlobalPool { pool, .. } => sig.extend_from_slice(&pool.argmax),
                Step::PerPoint { mlp, .. } => push_mlp(&mut sig, mlp),
            }
        }
        sig
    }

    /// Exact reverse-mode gradient of `upstream . outputs` with respect to
    /// the flat parameter vector used in the recorded forward pass.
    pub fn backward(&self, upstream: &[f64; 27]) -> Vec<f64> {
        let mut grads = vec![0.0; self.total_params];
        let mut tensor_grads: Vec<Option<DMatrix<f64>>> = vec![None; self.tensor_shapes.len()];
        let last = self.tensor_shapes.len() - 1;
        tensor_grads[last] = Some(DMatrix::from_fn(1, 27, |_, c| upstream[c]));

        for step in self.steps.iter().rev() {
            match step {
                Step::SetConv { mlp, pool, row_src, in_feat_dim, input, output } => {
                    let Some(dout) = tensor_grads[*output].take() else { continue };
                    let drows = max_pool_backward(pool, &dout, row_src.len());
                    let dinputs = mlp_backward(mlp, drows, &mut grads);
                    if *in_feat_dim > 0 {
                        let acc = tensor_grad(&mut tensor_grads, *input, self.tensor_shapes[*input]);
                        for (r, &src) in row_src.iter().enumerate() {
                            for c in 0..*in_feat_dim {
                                acc[(src as usize, c)] += dinputs[(r, 3 + c)];
                            }
                        }
                    }
                }
                Step::FlowEmbed { mlp, pool, row_center, row_neighbor, c1, c2, in1, in2, output, .. } => {
                    let Some(dout) = tensor_grads[*output].take() else { continue };
                    let drows = max_pool_backward(pool, &dout, row_center.len());
                    let dinputs = mlp_backward(mlp, drows, &mut grads);
                    if *c1 > 0 {
                        let acc = tensor_grad(&mut tensor_grads, *in1, self.tensor_shapes[*in1]);
                        for (r, &src) in row_center.iter().enumerate() {
                            for c in 0..*c1 {
                                acc[(src as usize, c)] += dinputs[(r, c)];
                            }
                        }
                    }
                    if *c2 > 0 {
                        let acc = tensor_grad(&mut tensor_grads, *in2, self.tensor_shapes[*in2]);
                        for (r, &src) in row_neighbor.iter().enumerate() {
                            for c in 0..*c2 {
                                acc[(src as usize, c)] += dinputs[(r, c1 + c)];
                            }
                        }
                    }
                }
                Step::SetUpconv {
                    group_mlp,
                    pool,
                    row_src,
                    c_coarse,
                    pooled_dim,
                    post_mlp,
                    coarse,
                    skip,
                    output,
                    ..
                } => {
                    let Some(dout) = tensor_grads[*output].take() else { continue };
                    let dpost = mlp_backward(post_mlp, dout, &mut grads);
                    let fine_count = dpost.nrows();
                    let c_skip = dpost.ncols() - pooled_dim;
                    if c_skip > 0 {
                        let acc = tensor_grad(&mut tensor_grads, *skip, self.tensor_shapes[*skip]);
                        for r in 0..fine_count {
                            for c in 0..c_skip {
                                acc[(r, c)] += dpost[(r, pooled_dim + c)];
                            }
                        }
                    }
                    let dpooled = dpost.columns(0, *pooled_dim).into_owned();
                    let drows = max_pool_backward(pool, &dpooled, row_src.len());
                    let dinputs = mlp_backward(group_mlp, drows, &mut grads);
                    if *c_coarse > 0 {
                        let acc = tensor_grad(&mut tensor_grads, *coarse, self.tensor_shapes[*coarse]);
                        for (r, &src) in row_src.iter().enumerate() {
                            for c in 0..*c_coarse {
                                acc[(src as usize, c)] += dinputs[(r, 3 + c)];
                            }
                        }
                    }
                }
                Step::PerPoint { mlp, input, output } => {
                    let Some(dout) = tensor_grads[*output].take() else { continue };
                    let dinput = mlp_backward(mlp, dout, &mut grads);
                    let acc = tensor_grad(&mut tensor_grads, *input, self.tensor_shapes[*input]);
                    *acc += dinput;
                }
                Step::GlobalPool { pool, rows, input, output } => {
                    let Some(dout) = tensor_grads[*output].take() else { continue };
                    let drows = max_pool_backward(pool, &dout, *rows);
                    let acc = tensor_grad(&mut tensor_grads, *input, self.tensor_shapes[*input]);
                    *acc += drows;
                }
            }
        }
        grads
    }
}

fn tensor_grad<'g>(
    grads: &'g mut [Option<DMatrix<f64>>],
    id: usize,
    shape: (usize, usize),
) -> &'g mut DMatrix<f64> {
    grads[id].get_or_insert_with(|| DMatrix::zeros(shape.0, shape.1))
}

// ---------------------------------------------------------------------
// Forward graph.
// ---------------------------------------------------------------------

struct Level {
    points: Vec<Vector3<f64>>,
    feats: usize, // tensor id
}

impl<'a> Runner<'a> {
    fn set_conv_layer(&mut self, conv: &ConvPlan, max_group: usize, level: &Level) -> Level {
        let points = &level.points;
        let centers: Vec<usize> = if conv.sample_rate >= 1.0 {
            (0..points.len()).collect()
        } else {
            let target = ((points.len() as f64 * conv.sample_rate).round() as usize)
                .clamp(1, points.len());
            canonical_fps(points, target)
        };
        let index = SpatialIndex::from_points(points).expect("non-empty level");
        let feats = &self.values[level.feats];
        let c_in = feats.ncols();
        let mut offsets = Vec::with_capacity(centers.len() + 1);
        let mut row_src: Vec<u32> = Vec::new();
        offsets.push(0);
        let mut groups: Vec<Vec<usize>> = Vec::with_capacity(centers.len());
        for &ci in &centers {
            let group = canonical_radius_group(&index, points, &points[ci], conv.radius, max_group);
            row_src.extend(group.iter().map(|&i| i as u32));
            offsets.push(row_src.len());
            groups.push(group);
        }
        let mut rows = DMatrix::zeros(row_src.len(), 3 + c_in);
        let mut r = 0;
        for (gi, &ci) in centers.iter().enumerate() {
            for &ni in &groups[gi] {
                let rel = points[ni] - points[ci];
                rows[(r, 0)] = rel[0];
                rows[(r, 1)] = rel[1];
                rows[(r, 2)] = rel[2];
                for c in 0..c_in {
                    rows[(r, 3 + c)] = feats[(ni, c)];
                }
                r += 1;
            }
        }
        let (mlp_out, mlp_rec) = self.mlp(&conv.mlp, rows);
        let (pooled, pool) = max_pool(&mlp_out, &offsets);
        let out_points: Vec<Vector3<f64>> = centers.iter().map(|&i| points[i]).collect();
        let out_id = self.new_tensor(pooled);
        if self.record {
            self.steps.push(Step::SetConv {
                mlp: mlp_rec,
                pool,
                row_src,
                in_feat_dim: c_in,
                input: level.feats,
                output: out_id,
            });
        }
        Level { points: out_points, feats: out_id }
    }

    fn flow_embedding_layer(&mut self, plan: &MlpPlan, k: usize, c1_level: &Level, c2_level: &Level) -> Level {
        let p1 = &c1_level.points;
        let p2 = &c2_level.points;
        let f1 = self.values[c1_level.feats].clone();
        let f2 = self.values[c2_level.feats].clone();
        let (c1, c2) = (f1.ncols(), f2.ncols());
        let index2 = SpatialIndex::from_points(p2).expect("non-empty level");
        let k_eff = k.min(p2.len());
        let mut offsets = Vec::with_capacity(p1.len() + 1);
        let mut row_center = Vec::new();
        let mut row_neighbor = Vec::new();
        offsets.push(0);
        let mut rows = DMatrix::zeros(p1.len() * k_eff, c1 + c2 + 3);
        let mut r = 0;
        for (i, q) in p1.iter().enumerate() {
            for ni in canonical_knn(&index2, p2, q, k_eff) {
                for c in 0..c1 {
                    rows[(r, c)] = f1[(i, c)];
                }
                for c in 0..c2 {
                    rows[(r, c1 + c)] = f2[(ni, c)];
                }
                let disp = p2[ni] - q;
                rows[(r, c1 + c2)] = disp[0];
                rows[(r, c1 + c2 + 1)] = disp[1];
                rows[(r, c1 + c2 + 2)] = disp[2];
                row_center.push(i as u32);
                row_neighbor.push(ni as u32);
                r += 1;
            }
            offsets.push(r);
        }
        let (mlp_out, mlp_rec) = self.mlp(plan, rows);
        let (pooled, pool) = max_pool(&mlp_out, &offsets);
        let out_id = self.new_tensor(pooled);
        if self.record {
            self.steps.push(Step::FlowEmbed {
                mlp: mlp_rec,
                pool,
                row_center,
                row_neighbor,
                c1,
                c2,
                in1: c1_level.feats,
                in2: c2_level.feats,
                output: out_id,
            });
        }
        Level { points: p1.clone(), feats: out_id }
    }

    fn set_upconv_layer(&mut self, up: &UpconvPlan, max_group: usize, coarse: &Level, fine: &Level) -> Level {
        let cpoints = &coarse.points;
        let fpoints = &fine.points;
        let cfeats = self.values[coarse.feats].clone();
        let sfeats = self.values[fine.feats].clone();
        let c_coarse = cfeats.ncols();
        let index = SpatialIndex::from_points(cpoints).expect("non-empty level");
        let mut offsets = Vec::with_capacity(fpoints.len() + 1);
        let mut row_src = Vec::new();
        offsets.push(0);
        let mut groups: Vec<Vec<usize>> = Vec::with_capacity(fpoints.len());
        for q in fpoints {
            let group = canonical_radius_group(&index, cpoints, q, up.radius, max_group);
            row_src.extend(group.iter().map(|&i| i as u32));
            offsets.push(row_src.len());
            groups.push(group);
        }
        let mut rows = DMatrix::zeros(row_src.len(), 3 + c_coarse);
        let mut r = 0;
        for (fi, q) in fpoints.iter().enumerate() {
            for &ni in &groups[fi] {
                let rel = cpoints[ni] - q;
                rows[(r, 0)] = rel[0];
                rows[(r, 1)] = rel[1];
                rows[(r, 2)] = rel[2];
                for c in 0..c_coarse {
                    rows[(r, 3 + c)] = cfeats[(ni, c)];
                }
                r += 1;
            }
        }
        let (group_out, group_rec) = self.mlp(&up.group, rows);
        let (pooled, pool) = max_pool(&group_out, &offsets);
        let pooled_dim = pooled.ncols();
        // Concatenate skip features and run the post MLP per fine point.
        let mut post_in = DMatrix::zeros(fpoints.len(), pooled_dim + sfeats.ncols());
        for i in 0..fpoints.len() {
            for c in 0..pooled_dim {
                post_in[(i, c)] = pooled[(i, c)];
            }
            for c in 0..sfeats.ncols() {
                post_in[(i, pooled_dim + c)] = sfeats[(i, c)];
            }
        }
        let (out, post_rec) = self.mlp(&up.post, post_in);
        let out_id = self.new_tensor(out);
        if self.record {
            self.steps.push(Step::SetUpconv {
                group_mlp: group_rec,
                pool,
                row_src,
                c_coarse,
                pooled_dim,
                post_mlp: post_rec,
                coarse: coarse.feats,
                skip: fine.feats,
                output: out_id,
            });
        }
        Level { points: fpoints.clone(), feats: out_id }
    }

    fn per_point_layer(&mut self, plan: &MlpPlan, level: &Level) -> usize {
        let x = self.values[level.feats].clone();
        let (out, rec) = self.mlp(plan, x);
        let out_id = self.new_tensor(out);
        if self.record {
            self.steps.push(Step::PerPoint { mlp: rec, input: level.feats, output: out_id });
        }
        out_id
    }

    fn global_pool(&mut self, input: usize) -> usize {
        let x = &self.values[input];
        let rows = x.nrows();
        let offsets = vec![0, rows];
        let (pooled, pool) = max_pool(x, &offsets);
        let out_id = self.new_tensor(pooled);
        if self.record {
            self.steps.push(Step::GlobalPool { pool, rows, input, output: out_id });
        }
        out_id
    }
}

fn run(
    pair: &FilteredPair,
    params: &NetworkParameters,
    cfg: &NetworkConfig,
    dropout_seed: Option<u64>,
    record: bool,
) -> Result<(GaussianPrediction, Option<Tape>), NetError> {
    let plan = build_plan(cfg)?;
    if params.layout.config_hash != cfg.config_hash() {
        return Err(NetError::HashMismatch {
            params_hash: params.layout.config_hash.clone(),
            config_hash: cfg.config_hash(),
        });
    }
    if params.data.len() != params.layout.total {
        return Err(NetError::ParamCount { have: params.data.len(), want: params.layout.total });
    }
    if pair.reading.len() != plan.pair_size || pair.reference.len() != plan.pair_size {
        return Err(NetError::PairSize {
            expected: plan.pair_size,
            reading: pair.reading.len(),
            reference: pair.reference.len(),
        });
    }

    let dropout = match dropout_seed {
        Some(seed) if plan.dropout_rate > 0.0 => Some((rng_from_seed(seed), plan.dropout_rate)),
        _ => None,
    };
    let mut runner = Runner {
        layout: &params.layout,
        params: &params.data,
        dropout,
        record,
        steps: Vec::new(),
        values: Vec::new(),
    };

    // Reading branch (cloud 1).
    let f0 = runner.new_tensor(DMatrix::zeros(pair.reading.len(), 0));
    let mut stack1 = vec![Level { points: pair.reading.points().to_vec(), feats: f0 }];
    for conv in &plan.pre {
        let top = stack1.last().unwrap();
        let next = runner.set_conv_layer(conv, plan.max_group, top);
        if conv.sample_rate < 1.0 {
            stack1.push(next);
        } else {
            *stack1.last_mut().unwrap() = next;
        }
    }

    // Reference branch (cloud 2) through the same shared convs.
    let f0b = runner.new_tensor(DMatrix::zeros(pair.reference.len(), 0));
    let mut level2 = Level { points: pair.reference.points().to_vec(), feats: f0b };
    for conv in &plan.pre {
        level2 = runner.set_conv_layer(conv, plan.max_group, &level2);
    }

    // Correlate the branches at the current reading level.
    let fe_out = {
        let top = stack1.last().unwrap();
        runner.flow_embedding_layer(&plan.fe, plan.fe_k, top, &level2)
    };
    *stack1.last_mut().unwrap() = fe_out;

    for conv in &plan.post {
        let top = stack1.last().unwrap();
        let next = runner.set_conv_layer(conv, plan.max_group, top);
        if conv.sample_rate < 1.0 {
            stack1.push(next);
        } else {
            *stack1.last_mut().unwrap() = next;
        }
    }

    for up in &plan.up {
        let coarse = stack1.pop().expect("upconv has a coarse level");
        let fine = stack1.last().unwrap();
        let merged = runner.set_upconv_layer(up, plan.max_group, &coarse, fine);
        *stack1.last_mut().unwrap() = merged;
    }
    debug_assert_eq!(stack1.len(), 1);

    let full = stack1.pop().unwrap();
    let regressed = runner.per_point_layer(&plan.regression, &full);
    let pooled = runner.global_pool(regressed);
    let head_in = Level { points: Vec::new(), feats: pooled };
    let head_out = runner.per_point_layer(&plan.head, &head_in);

    let out_mat = &runner.values[head_out];
    let mut output = [0.0f64; 27];
    for c in 0..27 {
        output[c] = out_mat[(0, c)];
    }
    if !output.iter().all(|v| v.is_finite()) {
        return Err(NetError::NonFinite("network outputs"));
    }
    let prediction = GaussianPrediction::from_outputs(&output);
    let tape = record.then(|| Tape {
        steps: std::mem::take(&mut runner.steps),
        tensor_shapes: runner.values.iter().map(|m| (m.nrows(), m.ncols())).collect(),
        total_params: params.layout.total,
        output,
    });
    Ok((prediction, tape))
}

/// Single forward pass; dropout active when a mask seed is given.
pub fn forward(
    pair: &FilteredPair,
    params: &NetworkParameters,
    cfg: &NetworkConfig,
    dropout_seed: Option<u64>,
) -> Result<GaussianPrediction, NetError> {
    run(pair, params, cfg, dropout_seed, false).map(|(p, _)| p)
}

/// Forward pass that records the tape for a matching backward pass.
pub fn forward_with_tape(
    pair: &FilteredPair,
    params: &NetworkParameters,
    cfg: &NetworkConfig,
    dropout_seed: Option<u64>,
) -> Result<(GaussianPrediction, Tape), NetError> {
    run(pair, params, cfg, dropout_seed, true).map(|(p, t)| (p, t.expect("tape recorded")))
}
