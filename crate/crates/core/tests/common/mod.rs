#![allow(dead_code)]

pub mod bleu;
pub mod flips;
pub mod gradients;
pub mod wilcoxon;
