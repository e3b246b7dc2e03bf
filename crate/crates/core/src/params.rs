//! Model configuration and the full set of learnable tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::float::Scalar;
use crate::tensor::Matrix;
use crate::vocab::{SegmentKind, VocabularyRegistry};

/// How masked-attribute reconstruction is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconstructionLoss {
    /// Softmax over the vocabulary against the normalized multi-hot target.
    SoftmaxNormalized,
    /// Independent sigmoids with binary cross entropy per vocabulary entry.
    SigmoidBinary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Width of each attribute embedding before concatenation.
    pub attr_dim: usize,
    pub max_long_positions: usize,
    pub max_short_positions: usize,
    pub max_long_words: usize,
    pub max_short_words: usize,
    /// Masked rows keep their position and segment terms instead of becoming zero.
    pub mask_keep_position: bool,
    pub reconstruction_loss: ReconstructionLoss,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden: 128,
            heads: 4,
            ffn_dim: 512,
            dropout: 0.1,
            attr_dim: 16,
            max_long_positions: 256,
            max_short_positions: 256,
            max_long_words: 128,
            max_short_words: 128,
            mask_keep_position: false,
            reconstruction_loss: ReconstructionLoss::SoftmaxNormalized,
            layer_norm_eps: 1e-12,
        }
    }
}

impl ModelConfig {
    /// Configuration used by the gradient checker.
    pub fn tiny() -> Self {
        ModelConfig {
            num_layers: 1,
            hidden: 8,
            heads: 2,
            ffn_dim: 16,
            dropout: 0.0,
            attr_dim: 3,
            max_long_positions: 8,
            max_short_positions: 8,
            max_long_words: 128,
            max_short_words: 128,
            mask_keep_position: false,
            reconstruction_loss: ReconstructionLoss::SoftmaxNormalized,
            layer_norm_eps: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden", self.hidden),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("attr_dim", self.attr_dim),
            ("max_long_positions", self.max_long_positions),
            ("max_short_positions", self.max_short_positions),
            ("max_long_words", self.max_long_words),
            ("max_short_words", self.max_short_words),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden size {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn max_positions(&self, kind: SegmentKind) -> usize {
        match kind {
            SegmentKind::LongTerm => self.max_long_positions,
            _ => self.max_short_positions,
        }
    }

    pub fn max_words(&self, kind: SegmentKind) -> usize {
        match kind {
            SegmentKind::LongTerm => self.max_long_words,
            _ => self.max_short_words,
        }
    }
}

/// Vocabulary sizes (including the UNKNOWN row) per attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocabLayout {
    pub long_term: Vec<usize>,
    pub short_term: Vec<usize>,
    pub profile: Vec<usize>,
}

impl VocabLayout {
    pub fn from_registry(registry: &VocabularyRegistry) -> Self {
        VocabLayout {
            long_term: registry.vocab_sizes(SegmentKind::LongTerm),
            short_term: registry.vocab_sizes(SegmentKind::ShortTerm),
            profile: registry.vocab_sizes(SegmentKind::UserProfile),
        }
    }

    pub fn get(&self, kind: SegmentKind) -> &[usize] {
        match kind {
            SegmentKind::LongTerm => &self.long_term,
            SegmentKind::ShortTerm => &self.short_term,
            SegmentKind::UserProfile => &self.profile,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub wq: Matrix<F>,
    pub bq: Matrix<F>,
    pub wk: Matrix<F>,
    pub bk: Matrix<F>,
    pub wv: Matrix<F>,
    pub bv: Matrix<F>,
    pub wo: Matrix<F>,
    pub bo: Matrix<F>,
    pub ln1_gain: Matrix<F>,
    pub ln1_bias: Matrix<F>,
    pub w1: Matrix<F>,
    pub b1: Matrix<F>,
    pub w2: Matrix<F>,
    pub b2: Matrix<F>,
    pub ln2_gain: Matrix<F>,
    pub ln2_bias: Matrix<F>,
}

/// A linear output layer `x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Matrix<F>,
    pub bias: Matrix<F>,
}

impl<F: Scalar> Linear<F> {
    fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }
}

/// Every learnable tensor. Gradients and optimizer moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    /// Per behavior segment (long, short), one table per attribute.
    pub attribute_embeddings: [Vec<Matrix<F>>; 2],
    /// Per behavior segment: concatenated attribute width x hidden.
    pub fusion: [Matrix<F>; 2],
    pub position_embeddings: [Matrix<F>; 2],
    pub segment_embeddings: Matrix<F>,
    pub profile_embeddings: Vec<Matrix<F>>,
    pub cls_embedding: Matrix<F>,
    pub layers: Vec<LayerParams<F>>,
    /// Per behavior segment, one reconstruction head per attribute.
    pub attribute_heads: [Vec<Linear<F>>; 2],
    pub classifier: Option<Linear<F>>,
}

/// Groups of tensors reported separately by the gradient checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TensorFamily {
    Embedding,
    Fusion,
    Attention,
    LayerNorm,
    FeedForward,
    ReconstructionHead,
    ClassificationHead,
}

impl TensorFamily {
    pub const ALL: [TensorFamily; 7] = [
        TensorFamily::Embedding,
        TensorFamily::Fusion,
        TensorFamily::Attention,
        TensorFamily::LayerNorm,
        TensorFamily::FeedForward,
        TensorFamily::ReconstructionHead,
        TensorFamily::ClassificationHead,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TensorFamily::Embedding => "embedding",
            TensorFamily::Fusion => "fusion",
            TensorFamily::Attention => "attention",
            TensorFamily::LayerNorm => "layer_norm",
            TensorFamily::FeedForward => "feed_forward",
            TensorFamily::ReconstructionHead => "reconstruction_head",
            TensorFamily::ClassificationHead => "classification_head",
        }
    }
}

fn seg_name(s: usize) -> &'static str {
    if s == 0 {
        "long"
    } else {
        "short"
    }
}

impl<F: Scalar> Parameters<F> {
    /// Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains.
    /// The classifier, when requested, starts at zero.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        vocab: &VocabLayout,
        num_classes: Option<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let std = 0.02;
        let mut normal = |r: usize, c: usize| Matrix::truncated_normal(r, c, std, rng);
        let sizes = [&vocab.long_term, &vocab.short_term];
        let attribute_embeddings =
            sizes.map(|v| v.iter().map(|&n| normal(n, config.attr_dim)).collect());
        let fusion = sizes.map(|v| normal(v.len() * config.attr_dim, h));
        let position_embeddings = [
            normal(config.max_long_positions, h),
            normal(config.max_short_positions, h),
        ];
        let segment_embeddings = normal(3, h);
        let profile_embeddings = vocab.profile.iter().map(|&n| normal(n, h)).collect();
        let cls_embedding = normal(1, h);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                wq: normal(h, h),
                bq: Matrix::zeros(1, h),
                wk: normal(h, h),
                bk: Matrix::zeros(1, h),
                wv: normal(h, h),
                bv: Matrix::zeros(1, h),
                wo: normal(h, h),
                bo: Matrix::zeros(1, h),
                ln1_gain: Matrix::filled(1, h, F::ONE),
                ln1_bias: Matrix::zeros(1, h),
                w1: normal(h, config.ffn_dim),
                b1: Matrix::zeros(1, config.ffn_dim),
                w2: normal(config.ffn_dim, h),
                b2: Matrix::zeros(1, h),
                ln2_gain: Matrix::filled(1, h, F::ONE),
                ln2_bias: Matrix::zeros(1, h),
            })
            .collect();
        let attribute_heads = sizes.map(|v| {
            v.iter()
                .map(|&n| Linear {
                    weight: normal(h, n),
                    bias: Matrix::zeros(1, n),
                })
                .collect()
        });
        let classifier = match num_classes {
            Some(c) if c < 2 => {
                return Err(Error::Config("classifier needs at least 2 classes".into()))
            }
            Some(c) => Some(Linear::zeros(h, c)),
            None => None,
        };
        Ok(Parameters {
            attribute_embeddings,
            fusion,
            position_embeddings,
            segment_embeddings,
            profile_embeddings,
            cls_embedding,
            layers,
            attribute_heads,
            classifier,
        })
    }

    /// Replaces the classification head with a fresh zero head.
    pub fn attach_classifier(&mut self, num_classes: usize) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config("classifier needs at least 2 classes".into()));
        }
        self.classifier = Some(Linear::zeros(self.hidden(), num_classes));
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.segment_embeddings.cols()
    }

    pub fn vocab_layout(&self) -> VocabLayout {
        VocabLayout {
            long_term: self.attribute_embeddings[0]
                .iter()
                .map(Matrix::rows)
                .collect(),
            short_term: self.attribute_embeddings[1]
                .iter()
                .map(Matrix::rows)
                .collect(),
            profile: self.profile_embeddings.iter().map(Matrix::rows).collect(),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.classifier.as_ref().map(|c| c.weight.cols())
    }

    /// A zero tensor set of identical shapes.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, m| m.fill(F::ZERO));
        z
    }

    /// Visits every tensor in canonical order with its name and family.
    pub fn for_each<'a>(&'a self, mut f: impl FnMut(&str, TensorFamily, &'a Matrix<F>)) {
        use TensorFamily::*;
        for s in 0..2 {
            for (k, m) in self.attribute_embeddings[s].iter().enumerate() {
                f(&format!("embed.{}.attr{k}", seg_name(s)), Embedding, m);
            }
        }
        for s in 0..2 {
            f(&format!("fusion.{}", seg_name(s)), Fusion, &self.fusion[s]);
        }
        for s in 0..2 {
            f(
                &format!("position.{}", seg_name(s)),
                Embedding,
                &self.position_embeddings[s],
            );
        }
        f("segment", Embedding, &self.segment_embeddings);
        for (k, m) in self.profile_embeddings.iter().enumerate() {
            f(&format!("embed.profile.attr{k}"), Embedding, m);
        }
        f("cls", Embedding, &self.cls_embedding);
        for (l, p) in self.layers.iter().enumerate() {
            let named: [(&str, TensorFamily, &Matrix<F>); 16] = [
                ("wq", Attention, &p.wq),
                ("bq", Attention, &p.bq),
                ("wk", Attention, &p.wk),
                ("bk", Attention, &p.bk),
                ("wv", Attention, &p.wv),
                ("bv", Attention, &p.bv),
                ("wo", Attention, &p.wo),
                ("bo", Attention, &p.bo),
                ("ln1_gain", LayerNorm, &p.ln1_gain),
                ("ln1_bias", LayerNorm, &p.ln1_bias),
                ("w1", FeedForward, &p.w1),
                ("b1", FeedForward, &p.b1),
                ("w2", FeedForward, &p.w2),
                ("b2", FeedForward, &p.b2),
                ("ln2_gain", LayerNorm, &p.ln2_gain),
                ("ln2_bias", LayerNorm, &p.ln2_bias),
            ];
            for (n, fam, m) in named {
                f(&format!("layer{l}.{n}"), fam, m);
            }
        }
        for s in 0..2 {
            for (k, head) in self.attribute_heads[s].iter().enumerate() {
                f(
                    &format!("head.{}.attr{k}.weight", seg_name(s)),
                    ReconstructionHead,
                    &head.weight,
                );
                f(
                    &format!("head.{}.attr{k}.bias", seg_name(s)),
                    ReconstructionHead,
                    &head.bias,
                );
            }
        }
        if let Some(c) = &self.classifier {
            f("classifier.weight", ClassificationHead, &c.weight);
            f("classifier.bias", ClassificationHead, &c.bias);
        }
    }

    /// Mutable counterpart of [`Parameters::for_each`], same order.
    pub fn for_each_mut<'a>(
        &'a mut self,
        mut f: impl FnMut(&str, TensorFamily, &'a mut Matrix<F>),
    ) {
        use TensorFamily::*;
        for (s, tables) in self.attribute_embeddings.iter_mut().enumerate() {
            for (k, m) in tables.iter_mut().enumerate() {
                f(&format!("embed.{}.attr{k}", seg_name(s)), Embedding, m);
            }
        }
        for (s, m) in self.fusion.iter_mut().enumerate() {
            f(&format!("fusion.{}", seg_name(s)), Fusion, m);
        }
        for (s, m) in self.position_embeddings.iter_mut().enumerate() {
            f(&format!("position.{}", seg_name(s)), Embedding, m);
        }
        f("segment", Embedding, &mut self.segment_embeddings);
        for (k, m) in self.profile_embeddings.iter_mut().enumerate() {
            f(&format!("embed.profile.attr{k}"), Embedding, m);
        }
        f("cls", Embedding, &mut self.cls_embedding);
        for (l, p) in self.layers.iter_mut().enumerate() {
            let named: [(&str, TensorFamily, &mut Matrix<F>); 16] = [
                ("wq", Attention, &mut p.wq),
                ("bq", Attention, &mut p.bq),
                ("wk", Attention, &mut p.wk),
                ("bk", Attention, &mut p.bk),
                ("wv", Attention, &mut p.wv),
                ("bv", Attention, &mut p.bv),
                ("wo", Attention, &mut p.wo),
                ("bo", Attention, &mut p.bo),
                ("ln1_gain", LayerNorm, &mut p.ln1_gain),
                ("ln1_bias", LayerNorm, &mut p.ln1_bias),
                ("w1", FeedForward, &mut p.w1),
                ("b1", FeedForward, &mut p.b1),
                ("w2", FeedForward, &mut p.w2),
                ("b2", FeedForward, &mut p.b2),
                ("ln2_gain", LayerNorm, &mut p.ln2_gain),
                ("ln2_bias", LayerNorm, &mut p.ln2_bias),
            ];
            for (n, fam, m) in named {
                f(&format!("layer{l}.{n}"), fam, m);
            }
        }
        for (s, heads) in self.attribute_heads.iter_mut().enumerate() {
            for (k, head) in heads.iter_mut().enumerate() {
                f(
                    &format!("head.{}.attr{k}.weight", seg_name(s)),
                    ReconstructionHead,
                    &mut head.weight,
                );
                f(
                    &format!("head.{}.attr{k}.bias", seg_name(s)),
                    ReconstructionHead,
                    &mut head.bias,
                );
            }
        }
        if let Some(c) = &mut self.classifier {
            f("classifier.weight", ClassificationHead, &mut c.weight);
            f("classifier.bias", ClassificationHead, &mut c.bias);
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix<F>> {
        let mut out = Vec::new();
        self.for_each(|_, _, m| out.push(m));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<F>> {
        let mut out = Vec::new();
        self.for_each_mut(|_, _, m| out.push(m));
        out
    }

    /// Errors unless both sets have identical tensor shapes.
    pub fn check_same_shapes(&self, other: &Self) -> Result<()> {
        let a = self.tensors();
        let b = other.tensors();
        if a.len() != b.len() {
            return Err(Error::Shape(format!("{} tensors vs {}", a.len(), b.len())));
        }
        for ((x, y), name) in a.iter().zip(&b).zip(self.tensor_names()) {
            if x.shape() != y.shape() {
                return Err(Error::Shape(format!(
                    "{name}: {:?} vs {:?}",
                    x.shape(),
                    y.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each(|n, _, _| names.push(n.to_string()));
        names
    }

    pub fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.for_each(|_, _, m| n += m.len());
        n
    }

    /// All tensors flattened into one vector, canonical order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_scalars());
        self.for_each(|_, _, m| out.extend_from_slice(m.as_slice()));
        out
    }

    /// Inverse of [`Parameters::flatten`].
    pub fn assign_flat(&mut self, values: &[F]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_scalars()
            )));
        }
        let mut offset = 0;
        self.for_each_mut(|_, _, m| {
            let n = m.len();
            m.as_mut_slice()
                .copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        Ok(())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, &y) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: F) {
        self.for_each_mut(|_, _, m| m.scale(s));
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        let mut bad = None;
        self.for_each(|n, _, m| {
            if bad.is_none() && !m.all_finite() {
                bad = Some(n.to_string());
            }
        });
        bad
    }

    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let cast_lin = |l: &Linear<F>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        Parameters {
            attribute_embeddings: [
                self.attribute_embeddings[0]
                    .iter()
                    .map(Matrix::cast)
                    .collect(),
                self.attribute_embeddings[1]
                    .iter()
                    .map(Matrix::cast)
                    .collect(),
            ],
            fusion: [self.fusion[0].cast(), self.fusion[1].cast()],
            position_embeddings: [
                self.position_embeddings[0].cast(),
                self.position_embeddings[1].cast(),
            ],
            segment_embeddings: self.segment_embeddings.cast(),
            profile_embeddings: self.profile_embeddings.iter().map(Matrix::cast).collect(),
            cls_embedding: self.cls_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    wq: p.wq.cast(),
                    bq: p.bq.cast(),
                    wk: p.wk.cast(),
                    bk: p.bk.cast(),
                    wv: p.wv.cast(),
                    bv: p.bv.cast(),
                    wo: p.wo.cast(),
                    bo: p.bo.cast(),
                    ln1_gain: p.ln1_gain.cast(),
                    ln1_bias: p.ln1_bias.cast(),
                    w1: p.w1.cast(),
                    b1: p.b1.cast(),
                    w2: p.w2.cast(),
                    b2: p.b2.cast(),
                    ln2_gain: p.ln2_gain.cast(),
                    ln2_bias: p.ln2_bias.cast(),
                })
                .collect(),
            attribute_heads: [
                self.attribute_heads[0].iter().map(cast_lin).collect(),
                self.attribute_heads[1].iter().map(cast_lin).collect(),
            ],
            classifier: self.classifier.as_ref().map(cast_lin),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layout() -> VocabLayout {
        VocabLayout {
            long_term: vec![3, 6],
            short_term: vec![4],
            profile: vec![3],
        }
    }

    #[test]
    fn init_shapes_and_conventions() {
        let cfg = ModelConfig::tiny();
        let p =
            Parameters::<f64>::init(&cfg, &layout(), Some(2), &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        assert_eq!(p.fusion[0].shape(), (2 * cfg.attr_dim, cfg.hidden));
        assert_eq!(p.attribute_heads[0][1].weight.shape(), (cfg.hidden, 6));
        assert!(p.layers[0].ln1_gain.as_slice().iter().all(|&g| g == 1.0));
        assert!(p.layers[0].bq.as_slice().iter().all(|&b| b == 0.0));
        assert!(p.fusion[0].as_slice().iter().all(|x| x.abs() <= 0.04));
        assert!(p
            .classifier
            .as_ref()
            .unwrap()
            .weight
            .as_slice()
            .iter()
            .all(|&w| w == 0.0));
        assert_eq!(p.vocab_layout(), layout());
        let names = p.tensor_names();
        let unique: std::collections::HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn flatten_roundtrip() {
        let cfg = ModelConfig::tiny();
        let p = Parameters::<f32>::init(&cfg, &layout(), None, &mut ChaCha8Rng::seed_from_u64(2))
            .unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.assign_flat(&[0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }
}
