//! Camera-trap processing: resumable deduplicated ingest, a priority-scheduled
//! detection pipeline, an append-only event store, poaching alerts, dataset
//! curation and mAP@0.5 evaluation.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alerts;
pub mod bbox;
pub mod curation;
pub mod eval;
pub mod ingest;
pub mod pipeline;
pub mod store;
pub mod synth;

pub use bbox::BoundingBox;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/ingest.md")]
    mod ingest {}
    #[doc = include_str!("../../../book/src/pipeline.md")]
    mod pipeline {}
    #[doc = include_str!("../../../book/src/store.md")]
    mod store {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/alerts.md")]
    mod alerts {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
}
