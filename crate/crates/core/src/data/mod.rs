//! Dataset indexing, class-disjoint splits, preprocessing and episode sampling.

pub mod episode;
pub mod index;
pub mod preprocess;
pub mod split;
pub mod store;

pub use episode::{check_split, sample_episode, sample_episode_plan, Episode, EpisodeItem, EpisodePlan, EpisodeSpec};
pub use index::{build_index, ClassEntry, DatasetIndex, ItemRef};
pub use preprocess::{preprocess, preprocess_file, ImageTensor, Normalization, IMAGE_SIZE};
pub use split::{make_splits, SplitPart, SplitSpec};
pub use store::ImageStore;
