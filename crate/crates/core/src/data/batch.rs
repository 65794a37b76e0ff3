use super::augment::{augment_video, AugmentConfig};
use super::synthetic::{nearest_text_clips, ClipSample, Stream};
use crate::error::{Error, Result};
use crate::losses::BatchPairing;
use crate::numerics::Rng;

/// Text clips per MIL positive set.
pub const MIL_POSITIVES: usize = 5;

/// `(stream, clip)` address of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Location {
    pub stream: usize,
    pub clip: usize,
}

/// A training batch: aligned video/audio clips, and for narrated samples the
/// texts of the nearest text clips of the same stream.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub samples: Vec<ClipSample>,
    pub locations: Vec<Location>,
    /// Per sample, clip indices (within its stream) of its MIL positives,
    /// nearest first. Empty when the stream has no text.
    pub positive_sets: Vec<Vec<usize>>,
    /// Texts of `positive_sets`, same layout.
    pub positive_texts: Vec<Vec<Vec<usize>>>,
    pub slots: usize,
}

impl TripletBatch {
    /// Assembles a batch from explicit locations.
    pub fn assemble(streams: &[Stream], locations: &[Location], slots: usize) -> Result<Self> {
        if locations.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if slots == 0 {
            return Err(Error::Config("MIL positive sets need at least one slot".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut samples = Vec::with_capacity(locations.len());
        let mut positive_sets = Vec::with_capacity(locations.len());
        let mut positive_texts = Vec::with_capacity(locations.len());
        for &loc in locations {
            if !seen.insert(loc) {
                return Err(Error::Config(format!(
                    "stream {} clip {} appears twice in one batch",
                    loc.stream, loc.clip
                )));
            }
            let stream = streams
                .get(loc.stream)
                .ok_or_else(|| Error::Config(format!("stream {} does not exist", loc.stream)))?;
            let clip = stream
                .clips
                .get(loc.clip)
                .ok_or_else(|| Error::Config(format!("clip {} outside stream {}", loc.clip, loc.stream)))?;
            let set = match nearest_text_clips(&stream.clips, loc.clip, slots) {
                Ok(set) => set,
                Err(Error::NoText) => Vec::new(),
                Err(e) => return Err(e),
            };
            let texts = set
                .iter()
                .map(|&i| stream.clips[i].text.clone().expect("nearest_text_clips returns text clips"))
                .collect();
            samples.push(clip.clone());
            positive_sets.push(set);
            positive_texts.push(texts);
        }
        Ok(TripletBatch {
            samples,
            locations: locations.to_vec(),
            positive_sets,
            positive_texts,
            slots,
        })
    }

    /// `batch` distinct locations drawn uniformly from all clips.
    pub fn sample(streams: &[Stream], batch: usize, slots: usize, rng: &mut Rng) -> Result<Self> {
        let all: Vec<Location> = streams
            .iter()
            .enumerate()
            .flat_map(|(s, st)| (0..st.clips.len()).map(move |c| Location { stream: s, clip: c }))
            .collect();
        if all.len() < batch {
            return Err(Error::Config(format!("batch of {batch} from only {} clips", all.len())));
        }
        let picked: Vec<Location> = rng.sample_sorted(all.len(), batch).into_iter().map(|i| all[i]).collect();
        Self::assemble(streams, &picked, slots)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn text_present(&self) -> Vec<bool> {
        self.positive_sets.iter().map(|p| !p.is_empty()).collect()
    }

    pub fn pairing(&self) -> BatchPairing {
        BatchPairing {
            text_present: self.text_present(),
            positives: self.positive_sets.iter().filter(|p| !p.is_empty()).map(Vec::len).collect(),
            slots: self.slots,
        }
    }

    /// Texts for the text tower, `slots` rows per narrated sample in batch
    /// order. Unused slots repeat the nearest text; the loss masks them.
    pub fn text_rows(&self) -> Vec<&[usize]> {
        let mut rows = Vec::new();
        for texts in self.positive_texts.iter().filter(|t| !t.is_empty()) {
            for s in 0..self.slots {
                rows.push(texts.get(s).unwrap_or(&texts[0]).as_slice());
            }
        }
        rows
    }

    /// Replaces every video with an augmented copy.
    pub fn augment(&mut self, cfg: &AugmentConfig, rng: &mut Rng) {
        for s in &mut self.samples {
            s.video = augment_video(&s.video, cfg, rng);
        }
    }

    /// Order-sensitive hash of the batch contents, for diagnostics.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (s, loc) in self.samples.iter().zip(&self.locations) {
            h.update(&(loc.stream as u64).to_le_bytes());
            h.update(&(loc.clip as u64).to_le_bytes());
            for v in &s.video.data {
                h.update(&v.to_le_bytes());
            }
            for v in &s.waveform {
                h.update(&v.to_le_bytes());
            }
        }
        h.finalize()
    }
}
