//! Declarative model specifications, the named catalog, and executable
//! networks (single models and late fusion).

mod catalog;
mod model;
mod network;
mod spec;

pub use catalog::{catalog, catalog_names, CatalogOptions, CATALOG};
pub use model::Model;
pub use model::Input;
pub use network::{Batch, FusionMember, FusionRegime, FusionSpec, Network, NetworkDesc};
pub use spec::{ActShape, InputKind, LayerSpec, ModelSpec};
