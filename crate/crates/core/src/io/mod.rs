//! File formats: NIfTI-1 volumes, CSV/JSON metric reports and transform
//! tables.

pub mod nifti;
pub mod report;

pub use nifti::{read_nifti, read_nifti_with_info, write_nifti, write_series, write_volume, NiftiDatatype, NiftiVolume, WriteOptions};
pub use report::{read_report_csv, write_report, MetricKey, MetricValue, MetricsReport, ReportFormat};
