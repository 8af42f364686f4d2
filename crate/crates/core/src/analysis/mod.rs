//! Internal analyses of pruned models: language subspaces of sentence
//! embeddings, overlap of pruning masks and language specificity of FFN neurons.

mod iou;
mod lape;
mod lsar;

pub use iou::{
    between_language_iou, mask_intersection, mask_iou, seed_intersections, within_language_iou, IndexSet,
    SUB_COMPONENTS,
};
pub use lape::{
    activation_probability, boxplot, lape, lape_groups, BoxStats, LapeEntry, LapeGroups, LapeTable,
    NeuronId, DEFAULT_GROUP_FRACTION,
};
pub use lsar::{delta_magnitude, lsar_fit, lsar_split, Component, LsarBasis};
