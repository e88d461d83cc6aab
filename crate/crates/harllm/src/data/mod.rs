//! Recording ingestion, windowing, normalization, splits and the prepared
//! dataset archive, plus a synthetic multi-domain generator for desk-scale
//! experiments.

pub mod recording;
pub mod split;
pub mod store;
pub mod synth;
pub mod windows;

pub use recording::{load_recording, load_recordings, save_recording_csv, LabelVocab, Recording, CHANNELS};
pub use split::{split_and_subsample, subsample_per_class, Grouping, SplitSpec, Splits};
pub use store::{
    save_dataset, DatasetManifest, NormalizationInfo, PreparedDataset, SplitName, DATASET_VERSION,
};
pub use synth::{class_frequency, synth_generate, synth_label_names, SynthSpec};
pub use windows::{
    apply_stats, batch_tensor, compute_stats_per_domain, expected_window_count, frame_batch,
    make_windows, normalize_per_window, unframe_batch, ChannelStats, WindowSet,
};
