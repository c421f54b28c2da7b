//! Ingestion of the data sources and assembly of patches.

pub mod archive;
pub mod ingest;
pub mod normalize;
pub mod patch;
pub mod roads;
pub mod targets;
pub mod validate;

pub use ingest::{Dataset, GridIssuance, HourlySeries, Station, StationMeasurement, TrafficReading};
pub use normalize::{denormalize_features, normalize_features, ChannelStats, FeatureStats};
pub use patch::{closest_measurement_benchmark, Patch, PatchBuilder, PatchLayout};
pub use roads::{grid_roads, grid_traffic, RoadCategory, RoadSegment, SegmentIncidence};
pub use targets::{build_target_values, build_targets, TargetProjector};
pub use validate::{validate_measurements, RejectionReport, ValidationRules};
