//! Mastitis risk prediction with counterfactual explanations.
//!
//! The pipeline: [`dataset`] turns herd records into feature vectors laid
//! out by the [`featcat`] catalog, [`gbm`] scores them, and [`cfx`] searches
//! for the smallest policy-compliant change that would make a cow predicted
//! healthy be predicted to succumb, using the [`cobyla`] solver. [`narrate`]
//! renders the result as a sentence and [`evalkit`] runs batch evaluations.

pub mod cfx;
pub mod checks;
pub mod cobyla;
pub mod dataset;
pub mod evalkit;
pub mod featcat;
pub mod gbm;
pub mod narrate;
pub mod oracle;
pub mod stats;
