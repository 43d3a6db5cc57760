//! JSON-lines motion datasets: a header record followed by one frame per
//! line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::frame::{make_windows, MotionFrame, MotionWindow};
use super::gait::{generate_gait, GaitSpec, GaitStyle};
use super::kinematics::NUM_JOINTS;
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "latentmimic.motion";
pub const DATASET_VERSION: u32 = 1;
pub const DEFAULT_FRAME_RATE: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    n: usize,
    frame_rate: f64,
    style: String,
}

/// A single-style motion clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionDataset {
    pub style: String,
    pub frame_rate: f64,
    pub joint_count: usize,
    pub frames: Vec<MotionFrame>,
}

impl MotionDataset {
    pub fn new(style: impl Into<String>, frame_rate: f64, frames: Vec<MotionFrame>) -> Self {
        let joint_count = frames.first().map_or(NUM_JOINTS, MotionFrame::joint_count);
        MotionDataset {
            style: style.into(),
            frame_rate,
            joint_count,
            frames,
        }
    }

    /// A procedurally generated clip of the given style.
    pub fn generate(style: GaitStyle, duration: f64, frame_rate: f64) -> Result<Self> {
        let frames = generate_gait(&GaitSpec::for_style(style), duration, frame_rate)?;
        Ok(Self::new(style.as_str(), frame_rate, frames))
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn windows(&self, w: usize) -> Vec<MotionWindow> {
        make_windows(&self.frames, w, self.frame_rate)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            n: self.joint_count,
            frame_rate: self.frame_rate,
            style: self.style.clone(),
        };
        serde_json::to_writer(&mut out, &header)?;
        out.write_all(b"\n")?;
        for f in &self.frames {
            serde_json::to_writer(&mut out, f)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Loads and validates a dataset. Record 0 is the header; frame `k` is
    /// record `k + 1`. An empty file yields an empty dataset.
    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let parse_err = |record: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            record,
            message,
        };
        let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty(),
            Err(_) => true,
        });
        let Some((_, first)) = lines.next() else {
            return Ok(MotionDataset::new("", DEFAULT_FRAME_RATE, Vec::new()));
        };
        let header: Header = serde_json::from_str(&first?).map_err(|e| parse_err(0, format!("bad header: {e}")))?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(parse_err(
                0,
                format!("unsupported format {} v{}", header.format, header.version),
            ));
        }
        if !(header.frame_rate > 0.0) {
            return Err(parse_err(0, format!("frame rate {} must be positive", header.frame_rate)));
        }
        let mut frames = Vec::new();
        for (_, line) in lines {
            let k = frames.len();
            let frame: MotionFrame =
                serde_json::from_str(&line?).map_err(|e| parse_err(k + 1, format!("frame {k}: {e}")))?;
            if frame.joint_count() != header.n {
                return Err(parse_err(
                    k + 1,
                    format!("frame {k}: {} joints, header declares {}", frame.joint_count(), header.n),
                ));
            }
            frame.validate().map_err(|e| parse_err(k + 1, format!("frame {k}: {e}")))?;
            frames.push(frame);
        }
        Ok(MotionDataset {
            style: header.style,
            frame_rate: header.frame_rate,
            joint_count: header.n,
            frames,
        })
    }
}
