#![allow(dead_code)]

pub mod autodiff;
pub mod head_checks;
pub mod metric_oracles;
pub mod perturb;
pub mod uncorr;
pub mod weibull;
