use std::io::Write;

use super::{GroupTag, MetricId, MetricSeries, MetricSink};

pub const CSV_HEADER: [&str; 4] = ["metric", "group", "window_start_s", "value"];

/// Every series the sink can produce, in export order: boundary metrics for
/// each group, then per-service metrics in topology order.
pub fn all_series(sink: &MetricSink) -> Vec<MetricSeries> {
    let mut out = Vec::new();
    for m in MetricId::BOUNDARY.iter() {
        for g in GroupTag::ALL {
            out.push(sink.series(m, g).expect("boundary metrics always resolve"));
        }
    }
    for s in sink.services() {
        for m in MetricId::service_metrics(s) {
            out.push(sink.series(&m, GroupTag::Global).expect("service is known to the sink"));
        }
    }
    out
}

/// Writes one row per (metric, group, window start, value).
pub fn write_csv<W: Write>(sink: &MetricSink, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for series in all_series(sink) {
        let metric = series.metric.to_string();
        for (start, value) in &series.samples {
            w.write_record([
                metric.as_str(),
                series.group.as_str(),
                &start.to_string(),
                &value.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
