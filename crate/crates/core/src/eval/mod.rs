mod collab;
mod metrics;
mod report;

pub use collab::{
    collaborative_ap, collaborative_frames, delivered_pose, encode_val, late_fusion_ap, local_ap_at, local_detections, prepare_common, refresh_received, CommonCache,
    ValFeatures,
};
pub use metrics::{average_precision, gt_loss, match_detections, FrameDetections};
pub use report::{emit_report, metrics_csv, parse_metrics_csv, summary_markdown, EvalReport, MeanStd, ScatterPoint, SweepTable, TableRow, CSV_HEADER};
