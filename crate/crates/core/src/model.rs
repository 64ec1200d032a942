//! The measure network `f(μ) = W3 · σ₂(W2 · ⟨σ₁(W1 · [x, R]), μ⟩)`.
//!
//! Inputs are batches of point sets; the inner layer is averaged over the
//! points of each set (summed for [`ClassTag::DeepSetsUnnormalized`]), so a
//! set is treated as its empirical measure. The three function classes
//! differ only in which layers are frozen at their random initialization
//! and in the path norm used to regularize them.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::data::SetBatch;
use crate::error::{Error, Result};
use crate::numerics::{gemm, row_sq_norms, Activation, Matrix, Rng, Trans};

/// Function class of a [`MeasureNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassTag {
    /// All three layers trained.
    S1,
    /// First layer frozen.
    S2,
    /// First and second layers frozen.
    S3,
    /// Like `S1` but pools by summing instead of averaging.
    DeepSetsUnnormalized,
}

impl ClassTag {
    pub const MEASURE_CLASSES: [ClassTag; 3] = [ClassTag::S1, ClassTag::S2, ClassTag::S3];

    /// Frozen flags for (W1, W2, W3).
    pub fn frozen(self) -> [bool; 3] {
        match self {
            ClassTag::S1 | ClassTag::DeepSetsUnnormalized => [false, false, false],
            ClassTag::S2 => [true, false, false],
            ClassTag::S3 => [true, true, false],
        }
    }

    /// Default hidden widths `(h1, h2)`.
    pub fn default_widths(self) -> (usize, usize) {
        match self {
            ClassTag::S1 | ClassTag::DeepSetsUnnormalized => (100, 100),
            ClassTag::S2 => (1000, 100),
            ClassTag::S3 => (1000, 1000),
        }
    }

    pub fn pooling(self) -> Pooling {
        match self {
            ClassTag::DeepSetsUnnormalized => Pooling::Sum,
            _ => Pooling::Mean,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ClassTag::S1 => "S1",
            ClassTag::S2 => "S2",
            ClassTag::S3 => "S3",
            ClassTag::DeepSetsUnnormalized => "deepsets",
        }
    }
}

impl fmt::Display for ClassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(ClassTag::S1),
            "S2" | "s2" => Ok(ClassTag::S2),
            "S3" | "s3" => Ok(ClassTag::S3),
            "deepsets" | "DeepSetsUnnormalized" => Ok(ClassTag::DeepSetsUnnormalized),
            other => Err(Error::usage(format!(
                "unknown class `{other}` (expected S1, S2, S3 or deepsets)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    First,
    Second,
    Third,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::First, Layer::Second, Layer::Third];

    fn index(self) -> usize {
        match self {
            Layer::First => 0,
            Layer::Second => 1,
            Layer::Third => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitScheme {
    /// Entries uniform on `±sqrt(6 / fan_in)`.
    KaimingUniform,
    /// Entries from `½ N(-mean, std²) + ½ N(mean, std²)`.
    GaussianMixture { mean: f64, std: f64 },
}

impl InitScheme {
    pub const PLANTED_MIXTURE: InitScheme = InitScheme::GaussianMixture {
        mean: 1.0,
        std: 0.5,
    };

    fn fill(self, rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
        let data = match self {
            InitScheme::KaimingUniform => {
                let bound = (6.0 / cols as f64).sqrt();
                (0..rows * cols)
                    .map(|_| rng.uniform_in(-bound, bound))
                    .collect()
            }
            InitScheme::GaussianMixture { mean, std } => (0..rows * cols)
                .map(|_| {
                    let centre = if rng.bernoulli(0.5) { mean } else { -mean };
                    rng.normal_with(centre, std)
                })
                .collect(),
        };
        Matrix::from_vec(rows, cols, data).expect("sized above")
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub seed: u64,
}

impl InitSpec {
    pub fn kaiming(seed: u64) -> Self {
        InitSpec {
            scheme: InitScheme::KaimingUniform,
            seed,
        }
    }
}

/// Architecture of a [`MeasureNet`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetShape {
    pub class: ClassTag,
    pub d: usize,
    pub h1: usize,
    pub h2: usize,
    pub out: usize,
    pub act1: Activation,
    pub act2: Activation,
    /// Constant appended to every point, `x̃ = [x, aug]`.
    pub aug: f64,
}

impl NetShape {
    pub const DEFAULT_AUG: f64 = 1.0;

    /// Class-default widths, ReLU activations, scalar output.
    pub fn for_class(class: ClassTag, d: usize) -> Self {
        let (h1, h2) = class.default_widths();
        NetShape {
            class,
            d,
            h1,
            h2,
            out: 1,
            act1: Activation::Relu,
            act2: Activation::Relu,
            aug: Self::DEFAULT_AUG,
        }
    }

    pub fn with_widths(mut self, h1: usize, h2: usize) -> Self {
        self.h1 = h1;
        self.h2 = h2;
        self
    }

    pub fn with_out(mut self, out: usize) -> Self {
        self.out = out;
        self
    }

    pub fn with_activations(mut self, act1: Activation, act2: Activation) -> Self {
        self.act1 = act1;
        self.act2 = act2;
        self
    }

    pub fn with_aug(mut self, aug: f64) -> Self {
        self.aug = aug;
        self
    }
}

/// Finite-width network on empirical measures.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasureNet {
    layers: [Matrix; 3],
    act1: Activation,
    act2: Activation,
    class: ClassTag,
    aug: f64,
    /// Row norms of W1 before the frozen-layer normalization.
    w1_scales: Option<Vec<f64>>,
    /// Bumped on every mutation so stale caches are detected.
    version: u64,
}

/// Creates a network with weights drawn per `init`; frozen layers get unit
/// rows.
pub fn init_model(shape: NetShape, init: InitSpec) -> Result<MeasureNet> {
    if shape.d == 0 || shape.h1 == 0 || shape.h2 == 0 || shape.out == 0 {
        return Err(Error::usage(format!(
            "widths must be positive (d={}, h1={}, h2={}, o={})",
            shape.d, shape.h1, shape.h2, shape.out
        )));
    }
    if !shape.aug.is_finite() {
        return Err(Error::usage("augmentation constant must be finite"));
    }
    let mut rng = Rng::new(init.seed);
    let w1 = init.scheme.fill(shape.h1, shape.d + 1, &mut rng);
    let w2 = init.scheme.fill(shape.h2, shape.h1, &mut rng);
    let w3 = init.scheme.fill(shape.out, shape.h2, &mut rng);
    MeasureNet::from_layers(shape.class, [w1, w2, w3], shape.act1, shape.act2, shape.aug)
}

impl MeasureNet {
    /// Assembles a network from explicit weights. Frozen layers are
    /// row-normalized.
    pub fn from_layers(
        class: ClassTag,
        layers: [Matrix; 3],
        act1: Activation,
        act2: Activation,
        aug: f64,
    ) -> Result<Self> {
        let mut net = Self::assemble(class, layers, act1, act2, aug)?;
        net.normalize_frozen();
        Ok(net)
    }

    fn assemble(
        class: ClassTag,
        layers: [Matrix; 3],
        act1: Activation,
        act2: Activation,
        aug: f64,
    ) -> Result<Self> {
        let [w1, w2, w3] = &layers;
        if w1.cols() < 2 {
            return Err(Error::dim("W1 needs d + 1 >= 2 columns"));
        }
        if w2.cols() != w1.rows() || w3.cols() != w2.rows() {
            return Err(Error::dim(format!(
                "layer shapes {:?}, {:?}, {:?} do not chain",
                w1.shape(),
                w2.shape(),
                w3.shape()
            )));
        }
        if layers.iter().any(|m| m.rows() == 0) {
            return Err(Error::usage("every layer needs at least one row"));
        }
        Ok(MeasureNet {
            layers,
            act1,
            act2,
            class,
            aug,
            w1_scales: None,
            version: 0,
        })
    }

    fn normalize_frozen(&mut self) {
        let frozen = self.class.frozen();
        if frozen[0] {
            self.w1_scales = Some(self.layers[0].normalize_rows());
        }
        if frozen[1] {
            self.layers[1].normalize_rows();
        }
    }

    pub fn class(&self) -> ClassTag {
        self.class
    }

    pub fn frozen(&self) -> [bool; 3] {
        self.class.frozen()
    }

    pub fn is_frozen(&self, layer: Layer) -> bool {
        self.frozen()[layer.index()]
    }

    pub fn activations(&self) -> (Activation, Activation) {
        (self.act1, self.act2)
    }

    pub fn aug(&self) -> f64 {
        self.aug
    }

    pub fn dim(&self) -> usize {
        self.layers[0].cols() - 1
    }

    pub fn widths(&self) -> (usize, usize) {
        (self.layers[0].rows(), self.layers[1].rows())
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].rows()
    }

    pub fn shape(&self) -> NetShape {
        let (h1, h2) = self.widths();
        NetShape {
            class: self.class,
            d: self.dim(),
            h1,
            h2,
            out: self.out_dim(),
            act1: self.act1,
            act2: self.act2,
            aug: self.aug,
        }
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn layer(&self, layer: Layer) -> &Matrix {
        &self.layers[layer.index()]
    }

    /// Original W1 row norms when W1 was normalized on freezing.
    pub fn first_layer_scales(&self) -> Option<&[f64]> {
        self.w1_scales.as_deref()
    }

    /// Replaces one weight matrix. Frozen layers are re-normalized.
    pub fn set_layer(&mut self, layer: Layer, weights: Matrix) -> Result<()> {
        let cur = &self.layers[layer.index()];
        if cur.shape() != weights.shape() {
            return Err(Error::dim(format!(
                "{layer:?} layer is {:?}, got {:?}",
                cur.shape(),
                weights.shape()
            )));
        }
        self.layers[layer.index()] = weights;
        match layer {
            Layer::First if self.is_frozen(Layer::First) => {
                self.w1_scales = Some(self.layers[0].normalize_rows());
            }
            Layer::Second if self.is_frozen(Layer::Second) => {
                self.layers[1].normalize_rows();
            }
            _ => {}
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable access for optimizers; bumps the version.
    pub(crate) fn layer_mut(&mut self, layer: Layer) -> &mut Matrix {
        self.version += 1;
        &mut self.layers[layer.index()]
    }

    /// Trainable layers, in order.
    pub fn trainable_layers(&self) -> Vec<Layer> {
        Layer::ALL
            .into_iter()
            .filter(|&l| !self.is_frozen(l))
            .collect()
    }

    /// Copies W1 from `source`. When W1 is frozen here it is
    /// re-normalized and the source row norms are kept in
    /// [`first_layer_scales`](Self::first_layer_scales).
    pub fn share_first_layer(&mut self, source: &MeasureNet) -> Result<()> {
        self.set_layer(Layer::First, source.layer(Layer::First).clone())
    }

    // ---- forward ---------------------------------------------------------

    /// Evaluates one set (rows are points).
    pub fn forward(&self, set: &Matrix) -> Result<(Vec<f64>, ForwardCache)> {
        let batch = SetBatch::single(set.clone())?;
        let (out, cache) = self.forward_batch(&batch)?;
        Ok((out.into_vec(), cache))
    }

    /// Output only.
    pub fn predict(&self, set: &Matrix) -> Result<Vec<f64>> {
        Ok(self.forward(set)?.0)
    }

    /// Evaluates every set of `batch`; row `b` of the result is the output
    /// for set `b`.
    pub fn forward_batch(&self, batch: &SetBatch) -> Result<(Matrix, ForwardCache)> {
        let first = self.first_stage(batch)?;
        let pooled = first.pooled.clone();
        let (out, upper) = self.upper_stage(pooled);
        Ok((
            out,
            ForwardCache {
                version: self.version,
                first: Some(first.inputs),
                upper,
            },
        ))
    }

    /// Outputs for a batch, computed in chunks to bound memory.
    pub fn predict_batch(&self, batch: &SetBatch) -> Result<Matrix> {
        let pooled = self.pooled_features(batch)?;
        Ok(self.upper_stage(pooled).0)
    }

    /// Pooled first-layer features `⟨σ₁(W1 x̃), μ⟩`, one row per set.
    pub fn pooled_features(&self, batch: &SetBatch) -> Result<Matrix> {
        Ok(self.first_stage(batch)?.pooled)
    }

    /// Runs only the layers above pooling on precomputed features, keeping
    /// what backward needs for W2 and W3.
    pub fn forward_from_pooled(&self, pooled: Matrix) -> Result<(Matrix, ForwardCache)> {
        if pooled.cols() != self.layers[0].rows() {
            return Err(Error::dim(format!(
                "pooled features have {} columns, h1 is {}",
                pooled.cols(),
                self.layers[0].rows()
            )));
        }
        let (out, upper) = self.upper_stage(pooled);
        Ok((
            out,
            ForwardCache {
                version: self.version,
                first: None,
                upper,
            },
        ))
    }

    fn check_batch(&self, batch: &SetBatch) -> Result<()> {
        if batch.dim() != self.dim() {
            return Err(Error::dim(format!(
                "points live in R^{}, network expects R^{}",
                batch.dim(),
                self.dim()
            )));
        }
        if batch.is_empty() {
            return Err(Error::usage("empty batch"));
        }
        for s in batch.sets() {
            if s.rows() == 0 {
                return Err(Error::usage("cannot evaluate an empty set"));
            }
            if !s.is_finite() {
                return Err(Error::domain("non-finite point"));
            }
        }
        Ok(())
    }

    fn first_stage(&self, batch: &SetBatch) -> Result<FirstStage> {
        self.check_batch(batch)?;
        let inputs = FirstInputs::new(batch, self.aug);
        let h1 = self.layers[0].rows();
        let mut pooled = Matrix::zeros(batch.len(), h1);
        for chunk in inputs.chunks() {
            let z1 = chunk.preactivations(&inputs.points, &self.layers[0]);
            for b in chunk.first_set..chunk.end_set {
                let (lo, hi) = (inputs.offsets[b], inputs.offsets[b + 1]);
                let acc = pooled.row_mut(b);
                for p in lo..hi {
                    let row = z1.row(p - chunk.first_point);
                    for (a, &z) in acc.iter_mut().zip(row) {
                        *a += self.act1.apply(z);
                    }
                }
                if self.class.pooling() == Pooling::Mean {
                    let inv = 1.0 / (hi - lo) as f64;
                    acc.iter_mut().for_each(|a| *a *= inv);
                }
            }
        }
        Ok(FirstStage { inputs, pooled })
    }

    fn upper_stage(&self, pooled: Matrix) -> (Matrix, UpperCache) {
        let b = pooled.rows();
        let (w2, w3) = (&self.layers[1], &self.layers[2]);
        let mut z2 = Matrix::zeros(b, w2.rows());
        gemm(1.0, &pooled, Trans::No, w2, Trans::Yes, 0.0, &mut z2);
        let a2 = z2.map(|z| self.act2.apply(z));
        let mut out = Matrix::zeros(b, w3.rows());
        gemm(1.0, &a2, Trans::No, w3, Trans::Yes, 0.0, &mut out);
        (out, UpperCache { pooled, z2, a2 })
    }

    // ---- backward --------------------------------------------------------

    /// Gradients of a scalar loss given `upstream = ∂L/∂output` (one row
    /// per set). Frozen layers get no gradient.
    pub fn backward(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<Gradients> {
        if cache.version != self.version {
            return Err(Error::usage(
                "stale forward cache: the network changed since the forward pass",
            ));
        }
        let up = &cache.upper;
        if upstream.shape() != (up.a2.rows(), self.out_dim()) {
            return Err(Error::dim(format!(
                "upstream gradient is {:?}, expected {:?}",
                upstream.shape(),
                (up.a2.rows(), self.out_dim())
            )));
        }
        let (w2, w3) = (&self.layers[1], &self.layers[2]);
        let mut g3 = Matrix::zeros(w3.rows(), w3.cols());
        gemm(1.0, upstream, Trans::Yes, &up.a2, Trans::No, 0.0, &mut g3);

        let train2 = !self.is_frozen(Layer::Second);
        let train1 = !self.is_frozen(Layer::First);
        if !train2 && !train1 {
            return Ok(Gradients {
                w1: None,
                w2: None,
                w3: g3,
            });
        }

        let mut dz2 = Matrix::zeros(up.z2.rows(), up.z2.cols());
        gemm(1.0, upstream, Trans::No, w3, Trans::No, 0.0, &mut dz2);
        for (d, &z) in dz2.as_mut_slice().iter_mut().zip(up.z2.as_slice()) {
            *d *= self.act2.derivative(z);
        }
        let g2 = train2.then(|| {
            let mut g = Matrix::zeros(w2.rows(), w2.cols());
            gemm(1.0, &dz2, Trans::Yes, &up.pooled, Trans::No, 0.0, &mut g);
            g
        });
        let g1 = if train1 {
            let inputs = cache.first.as_ref().ok_or_else(|| {
                Error::usage("cache was built from pooled features; W1 is trainable")
            })?;
            let mut dpooled = Matrix::zeros(dz2.rows(), w2.cols());
            gemm(1.0, &dz2, Trans::No, w2, Trans::No, 0.0, &mut dpooled);
            Some(self.first_layer_gradient(inputs, &dpooled))
        } else {
            None
        };
        Ok(Gradients {
            w1: g1,
            w2: g2,
            w3: g3,
        })
    }

    fn first_layer_gradient(&self, inputs: &FirstInputs, dpooled: &Matrix) -> Matrix {
        let w1 = &self.layers[0];
        let mut g1 = Matrix::zeros(w1.rows(), w1.cols());
        for chunk in inputs.chunks() {
            // recompute instead of caching: z1 dominates memory for big batches
            let mut dz1 = chunk.preactivations(&inputs.points, w1);
            for b in chunk.first_set..chunk.end_set {
                let (lo, hi) = (inputs.offsets[b], inputs.offsets[b + 1]);
                let scale = match self.class.pooling() {
                    Pooling::Mean => 1.0 / (hi - lo) as f64,
                    Pooling::Sum => 1.0,
                };
                let dp = dpooled.row(b);
                for p in lo..hi {
                    let row = dz1.row_mut(p - chunk.first_point);
                    for (z, &g) in row.iter_mut().zip(dp) {
                        *z = scale * g * self.act1.derivative(*z);
                    }
                }
            }
            let x = chunk.points(&inputs.points);
            gemm(1.0, &dz1, Trans::Yes, &x, Trans::No, 1.0, &mut g1);
        }
        g1
    }

    // ---- path norms ------------------------------------------------------

    /// Class path norm, applied per output row and summed:
    /// S1 `|w3|ᵀ|W2|K(W1)`, S2 `|w3|ᵀK(W2)`, S3 `‖w3‖₂`, with `K` the
    /// squared row norms. The unnormalized DeepSets class uses the S1 form.
    pub fn path_norm(&self) -> f64 {
        let (w1, w2, w3) = (&self.layers[0], &self.layers[1], &self.layers[2]);
        match self.class {
            ClassTag::S1 | ClassTag::DeepSetsUnnormalized => {
                let k1 = row_sq_norms(w1);
                let inner: Vec<f64> = w2
                    .iter_rows()
                    .map(|r| r.iter().zip(&k1).map(|(w, k)| w.abs() * k).sum())
                    .collect();
                abs_weighted_sum(w3, &inner)
            }
            ClassTag::S2 => abs_weighted_sum(w3, &row_sq_norms(w2)),
            ClassTag::S3 => row_sq_norms(w3).into_iter().map(f64::sqrt).sum(),
        }
    }

    /// Subgradient of [`path_norm`](Self::path_norm) for the trainable
    /// layers, with `sign(0) = 0`.
    pub fn path_norm_gradient(&self) -> Gradients {
        let (w1, w2, w3) = (&self.layers[0], &self.layers[1], &self.layers[2]);
        match self.class {
            ClassTag::S1 | ClassTag::DeepSetsUnnormalized => {
                let k1 = row_sq_norms(w1);
                let abs_w2 = w2.abs();
                let inner: Vec<f64> = abs_w2
                    .iter_rows()
                    .map(|r| r.iter().zip(&k1).map(|(w, k)| w * k).sum())
                    .collect();
                let outer = column_abs_sums(w3);
                let g3 = sign_times_columns(w3, &inner);
                let mut g2 = w2.map(sign);
                for (k, row) in (0..g2.rows()).map(|k| (k, outer[k])) {
                    for (g, kj) in g2.row_mut(k).iter_mut().zip(&k1) {
                        *g *= row * kj;
                    }
                }
                // coefficient of K(W1)_j in the norm
                let mut coef = vec![0.0; w1.rows()];
                for (k, r) in abs_w2.iter_rows().enumerate() {
                    for (c, w) in coef.iter_mut().zip(r) {
                        *c += outer[k] * w;
                    }
                }
                let mut g1 = w1.clone();
                for (j, c) in coef.iter().enumerate() {
                    g1.row_mut(j).iter_mut().for_each(|w| *w *= 2.0 * c);
                }
                Gradients {
                    w1: Some(g1),
                    w2: Some(g2),
                    w3: g3,
                }
            }
            ClassTag::S2 => {
                let k2 = row_sq_norms(w2);
                let outer = column_abs_sums(w3);
                let g3 = sign_times_columns(w3, &k2);
                let mut g2 = w2.clone();
                for (k, c) in outer.iter().enumerate() {
                    g2.row_mut(k).iter_mut().for_each(|w| *w *= 2.0 * c);
                }
                Gradients {
                    w1: None,
                    w2: Some(g2),
                    w3: g3,
                }
            }
            ClassTag::S3 => {
                let mut g3 = w3.clone();
                for r in 0..g3.rows() {
                    let n = g3.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let row = g3.row_mut(r);
                    if n > 0.0 {
                        row.iter_mut().for_each(|v| *v /= n);
                    } else {
                        row.fill(0.0);
                    }
                }
                Gradients {
                    w1: None,
                    w2: None,
                    w3: g3,
                }
            }
        }
    }

    // ---- checkpoint ------------------------------------------------------

    pub const CHECKPOINT_MAGIC: &'static str = "MEASURENET/1";

    /// Text checkpoint: magic line, header fields, then each layer as a
    /// `wN rows cols` line followed by one line per row.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CHECKPOINT_MAGIC)?;
        writeln!(w, "class {}", self.class)?;
        writeln!(w, "act1 {}", self.act1)?;
        writeln!(w, "act2 {}", self.act2)?;
        writeln!(w, "aug {}", self.aug)?;
        match &self.w1_scales {
            Some(s) => writeln!(w, "w1_scales {}", join_floats(s))?,
            None => writeln!(w, "w1_scales -")?,
        }
        for (i, m) in self.layers.iter().enumerate() {
            writeln!(w, "w{} {} {}", i + 1, m.rows(), m.cols())?;
            for row in m.iter_rows() {
                writeln!(w, "{}", join_floats(row))?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let mut next = |what: &str| -> Result<String> {
            lines
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, wanted {what}")))?
                .map_err(Error::from)
        };
        let magic = next("magic")?;
        if magic.trim() != Self::CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("bad magic line `{magic}`")));
        }
        let field = |line: String, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(|v| v.trim().to_string())
                .ok_or_else(|| Error::Checkpoint(format!("expected `{key}`, found `{line}`")))
        };
        let class: ClassTag = field(next("class")?, "class")?.parse()?;
        let act1: Activation = field(next("act1")?, "act1")?.parse()?;
        let act2: Activation = field(next("act2")?, "act2")?.parse()?;
        let aug: f64 = parse_float(&field(next("aug")?, "aug")?)?;
        let scales_raw = field(next("w1_scales")?, "w1_scales")?;
        let scales = if scales_raw == "-" {
            None
        } else {
            Some(parse_floats(&scales_raw)?)
        };
        let mut layers = Vec::with_capacity(3);
        for i in 1..=3 {
            let header = field(next("layer header")?, &format!("w{i}"))?;
            let dims: Vec<usize> = header
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Checkpoint(format!("bad dims `{header}`"))))
                .collect::<Result<_>>()?;
            let [rows, cols] = dims[..] else {
                return Err(Error::Checkpoint(format!("bad dims `{header}`")));
            };
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let row = parse_floats(&next("weights")?)?;
                if row.len() != cols {
                    return Err(Error::Checkpoint(format!(
                        "w{i} row has {} values, expected {cols}",
                        row.len()
                    )));
                }
                data.extend(row);
            }
            layers.push(Matrix::from_vec(rows, cols, data)?);
        }
        let w3 = layers.pop().unwrap();
        let w2 = layers.pop().unwrap();
        let w1 = layers.pop().unwrap();
        // stored weights are already normalized; keep them bit-exact
        let mut net = MeasureNet::assemble(class, [w1, w2, w3], act1, act2, aug)?;
        net.w1_scales = scales;
        Ok(net)
    }
}

/// Gradient per layer; `None` for frozen layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Option<Matrix>,
    pub w2: Option<Matrix>,
    pub w3: Matrix,
}

impl Gradients {
    pub fn get(&self, layer: Layer) -> Option<&Matrix> {
        match layer {
            Layer::First => self.w1.as_ref(),
            Layer::Second => self.w2.as_ref(),
            Layer::Third => Some(&self.w3),
        }
    }

    /// `self += c * other`, layer by layer where both are present.
    pub fn add_scaled(&mut self, c: f64, other: &Gradients) {
        if let (Some(a), Some(b)) = (self.w1.as_mut(), other.w1.as_ref()) {
            a.add_scaled(c, b);
        }
        if let (Some(a), Some(b)) = (self.w2.as_mut(), other.w2.as_ref()) {
            a.add_scaled(c, b);
        }
        self.w3.add_scaled(c, &other.w3);
    }

    pub fn is_finite(&self) -> bool {
        self.w3.is_finite()
            && self.w1.as_ref().map_or(true, Matrix::is_finite)
            && self.w2.as_ref().map_or(true, Matrix::is_finite)
    }
}

/// State kept by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    version: u64,
    first: Option<FirstInputs>,
    upper: UpperCache,
}

impl ForwardCache {
    pub fn pooled(&self) -> &Matrix {
        &self.upper.pooled
    }
}

#[derive(Clone, Debug)]
struct UpperCache {
    pooled: Matrix,
    z2: Matrix,
    a2: Matrix,
}

struct FirstStage {
    inputs: FirstInputs,
    pooled: Matrix,
}

/// Augmented points of a batch stacked row-wise, with set offsets.
#[derive(Clone, Debug)]
struct FirstInputs {
    points: Matrix,
    offsets: Vec<usize>,
}

/// Whole sets covering at most about `CHUNK_POINTS` points.
struct Chunk {
    first_set: usize,
    end_set: usize,
    first_point: usize,
    end_point: usize,
}

const CHUNK_POINTS: usize = 16_384;

impl FirstInputs {
    fn new(batch: &SetBatch, aug: f64) -> Self {
        let d = batch.dim();
        let total = batch.total_points();
        let mut data = Vec::with_capacity(total * (d + 1));
        let mut offsets = Vec::with_capacity(batch.len() + 1);
        offsets.push(0);
        for s in batch.sets() {
            for row in s.iter_rows() {
                data.extend_from_slice(row);
                data.push(aug);
            }
            offsets.push(offsets.last().unwrap() + s.rows());
        }
        FirstInputs {
            points: Matrix::from_vec(total, d + 1, data).expect("sized above"),
            offsets,
        }
    }

    fn chunks(&self) -> Vec<Chunk> {
        let n_sets = self.offsets.len() - 1;
        let mut out = Vec::new();
        let mut start = 0;
        while start < n_sets {
            let mut end = start + 1;
            while end < n_sets && self.offsets[end + 1] - self.offsets[start] <= CHUNK_POINTS {
                end += 1;
            }
            out.push(Chunk {
                first_set: start,
                end_set: end,
                first_point: self.offsets[start],
                end_point: self.offsets[end],
            });
            start = end;
        }
        out
    }
}

impl Chunk {
    fn points(&self, all: &Matrix) -> Matrix {
        let c = all.cols();
        Matrix::from_vec(
            self.end_point - self.first_point,
            c,
            all.as_slice()[self.first_point * c..self.end_point * c].to_vec(),
        )
        .expect("slice of a valid matrix")
    }

    fn preactivations(&self, all: &Matrix, w1: &Matrix) -> Matrix {
        let x = self.points(all);
        let mut z = Matrix::zeros(x.rows(), w1.rows());
        gemm(1.0, &x, Trans::No, w1, Trans::Yes, 0.0, &mut z);
        z
    }
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_o Σ_k |w[o,k]| v[k]`.
fn abs_weighted_sum(w: &Matrix, v: &[f64]) -> f64 {
    w.iter_rows()
        .map(|r| r.iter().zip(v).map(|(a, b)| a.abs() * b).sum::<f64>())
        .sum()
}

/// `Σ_o |w[o,k]|` for each column `k`.
fn column_abs_sums(w: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; w.cols()];
    for r in w.iter_rows() {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v.abs();
        }
    }
    out
}

/// `sign(w[o,k]) * v[k]`.
fn sign_times_columns(w: &Matrix, v: &[f64]) -> Matrix {
    let mut g = w.map(sign);
    for r in 0..g.rows() {
        for (x, s) in g.row_mut(r).iter_mut().zip(v) {
            *x *= s;
        }
    }
    g
}

fn join_floats(v: &[f64]) -> String {
    let mut s = String::with_capacity(v.len() * 20);
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        s.push_str(&format!("{x:?}"));
    }
    s
}

fn parse_float(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|_| Error::Checkpoint(format!("bad number `{s}`")))
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_float).collect()
}
