//! Hamming-space retrieval: packed code books, ranking, mAP@K and
//! precision-recall curves.

mod codes;
mod metrics;

pub use codes::{
    bytes_for, hamming_packed, pack_signs, unpack_signs, BinaryCode, CodeBook, CODE_MAGIC,
    CODE_VERSION,
};
pub use metrics::{
    average_precision, average_precisions, map_at_k, pr_curve, rank, read_metrics_csv, read_pr_csv,
    write_metrics_csv, write_pr_csv, MetricRow, PrPoint, RankedList,
};

use std::time::Instant;

use rayon::prelude::*;

use crate::augment::{eval_clip, ClipView};
use crate::corpus::LoadedVideo;
use crate::encoder::{encode_codes, ModelState};
use crate::error::Result;

const REPORT_EVERY: usize = 100;
const ENCODE_CHUNK: usize = 32;

/// Encodes every video from its deterministic evaluation clip.
pub fn encode_corpus(model: &ModelState, videos: &[LoadedVideo]) -> Result<CodeBook> {
    let clip_len = model.config.clip_length;
    let mut book = CodeBook::new(model.config.code_bits);
    for (n, group) in videos.chunks(REPORT_EVERY).enumerate() {
        let start = Instant::now();
        let clips: Vec<ClipView> = group
            .par_iter()
            .map(|v| eval_clip(v, clip_len))
            .collect::<Result<_>>()?;
        let codes = encode_codes(model, &clips, ENCODE_CHUNK)?;
        for (v, row) in group.iter().zip(codes.rows()) {
            book.push(v.record.id.clone(), v.record.label, &row.to_vec())?;
        }
        let ms = start.elapsed().as_secs_f64() * 1e3 / group.len() as f64;
        log::info!(
            "encoded {} / {} videos, {ms:.3} ms/video",
            n * REPORT_EVERY + group.len(),
            videos.len()
        );
    }
    Ok(book)
}
