//! Progressive three-stage training, anomaly generation, detection and the
//! toy corpus.

mod corpus;
mod infer;
mod manip;
mod schedule;
mod train;

pub use corpus::{
    build_toy_corpus, build_toy_corpus_full, category_name, DefectKind, ToyCorpus, ToyCorpusSpec,
};
pub use infer::{detect, detect_batch, generate_anomaly, run_batched};
pub use manip::{
    apply_edit_spec, sample_batch_edits, sample_edit_spec, EditSpec, ManipulationParams,
};
pub use schedule::{LrDecay, OptimizerKind, StageSchedule, ADAM_BETAS};
pub use train::{
    load_all, train_blaze, train_blaze_from, train_boot, train_boot_from, train_flare,
    train_flare_from, LossRecord, StageOutcome, TrainOptions,
};

/// Mixes `base` with `tags` (SplitMix64 finalizer per word).
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    tags.iter()
        .fold(mix(base.wrapping_add(0x9e37_79b9_7f4a_7c15)), |acc, &t| {
            mix(acc ^ t.wrapping_add(0x9e37_79b9_7f4a_7c15))
        })
}
