//! Desk-scale engine for open-world semi-supervised learning.
//!
//! Two training stages: novel-class discovery driven by a pairwise
//! similarity loss with a bi-level hypergradient update of the similarity
//! network, then closed-world SSL over a rebuilt labeled set containing
//! balanced, confident pseudo-labels for the discovered classes.
//! Evaluation aligns predicted and hidden classes with the Hungarian
//! algorithm.

pub mod bilevel;
pub mod checkpoint;
pub mod data;
pub mod evalmetrics;
pub mod models;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod pseudolabels;
pub mod runner;
pub mod stage2;
pub mod tape;
