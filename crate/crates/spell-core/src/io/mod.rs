//! On-disk formats and dataset assembly.
//!
//! * [`tracks`] — face-box CSV (`video_id,time,cx,cy,w,h,entity_id,label`);
//! * [`features`] — binary feature store plus its CSV row index;
//! * [`dataset`] — joins tracks with features into chunked graphs;
//! * [`checkpoint`] — named-tensor model snapshot format;
//! * [`config_file`] — flat `key = value` configuration files;
//! * [`synth`] — deterministic synthetic benchmark generator.

pub mod checkpoint;
pub mod config_file;
pub mod dataset;
pub mod features;
pub mod predictions;
pub mod synth;
pub mod tracks;

/// Timestamps are joined across files after rounding to microseconds, so a
/// printed-and-reparsed time still matches its feature row.
pub fn time_key(t: f64) -> i64 {
    (t * 1e6).round() as i64
}
