//! Whole-video inference: clip segmentation, per-clip scoring, mean pooling of
//! quality and the clip-by-artifact diagnostic map.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};
use crate::lab::ARTIFACTS;
use crate::model::{assemble_input, Mode, Model, Routing};
use crate::video::FrameSequence;

/// Non-overlapping clips of `clip_len` frames. The trailing partial clip is dropped;
/// a video shorter than one clip yields a single clip padded with its last frame.
pub fn segment_clips(video: &FrameSequence, clip_len: usize) -> Result<Vec<FrameSequence>> {
    Ok(clip_spans(video.frames(), clip_len)?
        .into_iter()
        .map(|(start, _)| video.frame_window(start, clip_len))
        .collect::<Result<_>>()?)
}

/// `[start, end)` source frames covered by each clip.
pub fn clip_spans(frames: usize, clip_len: usize) -> Result<Vec<(usize, usize)>> {
    if frames == 0 {
        return arg("video has no frames");
    }
    if clip_len < 2 {
        return arg(format!("clip_len must be at least 2, got {clip_len}"));
    }
    if frames < clip_len {
        return Ok(vec![(0, frames)]);
    }
    Ok((0..frames / clip_len).map(|i| (i * clip_len, (i + 1) * clip_len)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipScore {
    pub clip_index: usize,
    pub q_clip: f64,
    pub a_clip: Vec<f64>,
    pub frame_span: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub artifact: String,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub artifact: String,
    pub max: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputDigests {
    pub distorted: String,
    pub reference: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoReport {
    pub q_video: f64,
    pub clip_scores: Vec<ClipScore>,
    /// One row per clip, one column per artifact.
    pub diagnostic_map: Vec<Vec<f64>>,
    pub artifact_summary: Vec<ArtifactSummary>,
    pub mode: Mode,
    pub threshold: Option<f64>,
    pub verdicts: Option<Vec<Verdict>>,
    pub checkpoint_hash: String,
    pub inputs: InputDigests,
}

fn artifact_name(i: usize) -> String {
    ARTIFACTS.get(i).map_or_else(|| format!("artifact_{i}"), |k| k.name().to_string())
}

/// Scores one clip (already cropped to patch multiples) in evaluation mode.
pub fn score_clip(model: &Model, dist: &FrameSequence, reference: Option<&FrameSequence>) -> Result<(f64, Vec<f64>)> {
    let p = model.forward(&assemble_input(dist, reference, model.config.mode)?, Routing::All)?;
    Ok((p.q, p.a))
}

/// Segments, scores every clip and pools.
pub fn score_video(dist: &FrameSequence, reference: Option<&FrameSequence>, model: &Model) -> Result<VideoReport> {
    let mode = model.config.mode;
    match (mode, reference) {
        (Mode::Nr, Some(_)) => return arg("mode mismatch: NR checkpoint cannot take a reference"),
        (Mode::Fr, None) => return arg("mode mismatch: FR checkpoint needs a reference"),
        (Mode::Fr, Some(r)) if r.frames() != dist.frames() || r.height() != dist.height() || r.width() != dist.width() => {
            return arg(format!(
                "reference is {}x{}x{} but distorted video is {}x{}x{}",
                r.frames(),
                r.height(),
                r.width(),
                dist.frames(),
                dist.height(),
                dist.width()
            ))
        }
        _ => {}
    }
    let patch = model.config.patch_size;
    let clip_len = model.config.clip_len;
    let d = dist.center_crop_to_multiple(patch)?;
    let r = reference.map(|r| r.center_crop_to_multiple(patch)).transpose()?;
    let spans = clip_spans(d.frames(), clip_len)?;
    let mut scores = Vec::with_capacity(spans.len());
    for (i, &(start, end)) in spans.iter().enumerate() {
        let dc = d.frame_window(start, clip_len)?;
        let rc = r.as_ref().map(|r| r.frame_window(start, clip_len)).transpose()?;
        let (q_clip, a_clip) = score_clip(model, &dc, rc.as_ref())?;
        scores.push(ClipScore { clip_index: i, q_clip, a_clip, frame_span: (start, end) });
    }
    let inputs = InputDigests { distorted: dist.digest(), reference: reference.map(FrameSequence::digest) };
    aggregate_clips(scores, mode, model.state_hash(), inputs)
}

/// Pools clip scores into a report: mean quality and the stacked artifact rows.
pub fn aggregate_clips(clip_scores: Vec<ClipScore>, mode: Mode, checkpoint_hash: String, inputs: InputDigests) -> Result<VideoReport> {
    let Some(first) = clip_scores.first() else {
        return arg("no clips to aggregate");
    };
    let n = first.a_clip.len();
    if clip_scores.iter().any(|c| c.a_clip.len() != n) {
        return arg("clips disagree on artifact dimension");
    }
    let count = clip_scores.len() as f64;
    let q_video = clip_scores.iter().map(|c| c.q_clip).sum::<f64>() / count;
    let diagnostic_map: Vec<Vec<f64>> = clip_scores.iter().map(|c| c.a_clip.clone()).collect();
    let artifact_summary = (0..n)
        .map(|i| ArtifactSummary {
            artifact: artifact_name(i),
            max: diagnostic_map.iter().map(|r| r[i]).fold(f64::NEG_INFINITY, f64::max),
            mean: diagnostic_map.iter().map(|r| r[i]).sum::<f64>() / count,
        })
        .collect();
    Ok(VideoReport {
        q_video,
        clip_scores,
        diagnostic_map,
        artifact_summary,
        mode,
        threshold: None,
        verdicts: None,
        checkpoint_hash,
        inputs,
    })
}

/// Video-level verdicts: artifact `i` is flagged iff its maximum over clips reaches `threshold`.
pub fn threshold_diagnostics(report: &VideoReport, threshold: f64) -> Result<Vec<Verdict>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return arg(format!("threshold {threshold} outside (0, 1)"));
    }
    Ok(report
        .artifact_summary
        .iter()
        .map(|s| Verdict { artifact: s.artifact.clone(), max: s.max, flagged: s.max >= threshold })
        .collect())
}

impl VideoReport {
    /// Attaches thresholded verdicts.
    pub fn with_verdicts(mut self, threshold: f64) -> Result<Self> {
        self.verdicts = Some(threshold_diagnostics(&self, threshold)?);
        self.threshold = Some(threshold);
        Ok(self)
    }

    pub fn flagged(&self) -> Vec<&str> {
        self.verdicts.iter().flatten().filter(|v| v.flagged).map(|v| v.artifact.as_str()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::RangeTag;

    fn video(frames: usize) -> FrameSequence {
        FrameSequence::from_fn(frames, 16, 16, 8, 30.0, RangeTag::Sdr, |t, y, x, c| ((t * 7 + y + x + c) % 256) as f64).unwrap()
    }

    #[test]
    fn segmentation_arithmetic() {
        assert_eq!(clip_spans(36, 12).unwrap(), vec![(0, 12), (12, 24), (24, 36)]);
        assert_eq!(clip_spans(30, 12).unwrap(), vec![(0, 12), (12, 24)]);
        let v = video(7);
        let clips = segment_clips(&v, 12).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(clips[0].frames(), 12);
        for t in 6..12 {
            assert_eq!(clips[0].frame(t), v.frame(6));
        }
        let v = video(30);
        let clips = segment_clips(&v, 12).unwrap();
        assert_eq!(clips[1].frame(0), v.frame(12));
        assert!(clip_spans(0, 12).is_err() && clip_spans(5, 1).is_err());
    }

    fn clip(i: usize, q: f64, a: Vec<f64>) -> ClipScore {
        ClipScore { clip_index: i, q_clip: q, a_clip: a, frame_span: (i * 12, i * 12 + 12) }
    }

    fn digests() -> InputDigests {
        InputDigests { distorted: "d".into(), reference: None }
    }

    #[test]
    fn thresholds_use_max_pooling() {
        let mut rows = vec![vec![0.1, 0.1]; 3];
        rows[1][1] = 0.9;
        let r = aggregate_clips(rows.into_iter().enumerate().map(|(i, a)| clip(i, 1.0, a)).collect(), Mode::Nr, String::new(), digests())
            .unwrap();
        let v = threshold_diagnostics(&r, 0.5).unwrap();
        assert_eq!(v.iter().map(|v| v.flagged).collect::<Vec<_>>(), vec![false, true]);
        let mut prev = usize::MAX;
        for t in [0.05, 0.1, 0.3, 0.9, 0.95] {
            let n = threshold_diagnostics(&r, t).unwrap().iter().filter(|v| v.flagged).count();
            assert!(n <= prev);
            prev = n;
        }
        assert!(threshold_diagnostics(&r, 1.0).is_err());
        let quiet = aggregate_clips(vec![clip(0, 0.0, vec![1e-9; 10])], Mode::Nr, String::new(), digests()).unwrap();
        assert!(quiet.with_verdicts(0.5).unwrap().flagged().is_empty());
    }
}
