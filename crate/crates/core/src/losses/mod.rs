//! Generator and discriminator objectives.

mod adversarial;
mod extractor;
mod histogram;
mod perceptual;
mod pixel;
mod total;

pub use adversarial::{adversarial_losses, d_hinge, g_hinge};
pub use extractor::{FeatureExtractor, IdentityExtractor, Vgg19, VggWeights, PIXELS};
pub use histogram::{histogram_from_features, histogram_match, histogram_match_binned, match_features, HistogramConfig};
pub use perceptual::{
    content_from_features, gram_matrix, style_from_features, ExtractorConfig, LayerWeight, PerceptualConfig,
};
pub use pixel::{pixel_l1, PixelConfig};
pub use total::{
    active_terms, generator_total, generator_total_var, LossConfig, LossReport, LossTerms, LossWeights, Losses, Stage,
    TermCoefficients, TERM_NAMES,
};
