use super::{DspError, StftConfig, StftPlan};

/// Frame-push STFT. Chunks of exactly `hop` samples go in; a spectrum comes
/// out as soon as the window that ends at the newest sample is complete.
#[derive(Debug)]
pub struct StreamingStft {
    plan: StftPlan<f32>,
    buf: Vec<f32>,
    /// Absolute index of `buf[0]`.
    offset: usize,
    next_frame: usize,
}

/// One spectrogram frame.
#[derive(Clone, Debug, PartialEq)]
pub struct StftFrame {
    pub index: usize,
    pub re: Vec<f32>,
    pub im: Vec<f32>,
}

impl StreamingStft {
    pub fn new(cfg: StftConfig) -> Result<Self, DspError> {
        Ok(Self {
            plan: StftPlan::new(cfg)?,
            buf: Vec::with_capacity(cfg.window_len + cfg.hop),
            offset: 0,
            next_frame: 0,
        })
    }

    pub fn frames_emitted(&self) -> usize {
        self.next_frame
    }

    pub fn push(&mut self, chunk: &[f32]) -> Result<Option<StftFrame>, DspError> {
        let cfg = *self.plan.config();
        if chunk.len() != cfg.hop {
            return Err(DspError::ChunkSize {
                got: chunk.len(),
                expected: cfg.hop,
            });
        }
        self.buf.extend_from_slice(chunk);
        let start = self.next_frame * cfg.hop;
        if start + cfg.window_len > self.offset + self.buf.len() {
            return Ok(None);
        }
        let bins = self.plan.bins();
        let (mut re, mut im) = (vec![0.0; bins], vec![0.0; bins]);
        let local = start - self.offset;
        self.plan
            .analyze_frame(&self.buf[local..local + cfg.window_len], &mut re, &mut im);
        let frame = StftFrame {
            index: self.next_frame,
            re,
            im,
        };
        self.next_frame += 1;
        // Drop samples no later frame can reach.
        let keep_from = self.next_frame * cfg.hop - self.offset;
        self.buf.drain(..keep_from.min(self.buf.len()));
        self.offset += keep_from;
        Ok(Some(frame))
    }
}
