//! Open-vocabulary semantic parsing over a knowledge graph: surface logical
//! forms, path features, predicate execution models, query answering and
//! ranked-retrieval evaluation.

pub mod error;
pub mod eval;
pub mod feature_select;
pub mod kg;
pub mod logical_form;
pub mod model;
pub mod pipeline;
pub mod query;
pub mod sfe;
pub mod synth;

pub use error::{Error, Result};
pub use kg::{EntityId, KnowledgeGraph, RelationId};
pub use logical_form::{LogicalForm, Predicate, PredicateInstance};
pub use model::{Mode, ModelConfig, PredicateModel};
pub use sfe::{FeatureTable, FeatureVector, PathFeature};
