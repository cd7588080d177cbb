//! Point-cloud semantic segmentation by repeated projection onto 2D grids.

pub mod cloud;
pub mod error;
pub mod io;
pub mod kdtree;
pub mod model;
pub mod preprocess;
pub mod projection;
pub mod synthetic;
pub mod tensor;
pub mod timing;
pub mod train;

pub use cloud::{Label, Point, PointCloud, IGNORE};
pub use error::{Error, Result};
pub use kdtree::{KdTree, KnnResult};
pub use tensor::{Tape, Tensor, Var};
pub use io::RemapTable;
pub use model::{ModelConfig, ModelParams, PreparedCloud, Segmentation};
pub use preprocess::{AugmentConfig, PreprocessConfig};
pub use projection::{CellAssignment, GridSpec};
pub use train::{ConfusionMatrix, MetricsReport};
