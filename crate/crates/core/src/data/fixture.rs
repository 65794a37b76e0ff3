//! Record file for generated streams.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "VATTSYN1"
//! u32 streams, u32 frames, u32 height, u32 width, u32 samples
//! per stream: u64 id, u32 clips
//!   per clip: f64 timestamp, u32 concept, u32 variant,
//!             u32 text length (u32::MAX when absent), u32 ids[length],
//!             f32 video[frames·height·width·3], f32 waveform[samples]
//! ```

use std::io::{Read, Write};

use super::synthetic::{ClipSample, Stream};
use crate::error::{Error, Result};
use crate::tokenizers::{VideoClip, VIDEO_CHANNELS};

pub const MAGIC: &[u8; 8] = b"VATTSYN1";
const ABSENT: u32 = u32::MAX;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit the record format")))
}

pub fn write_streams<W: Write>(mut w: W, streams: &[Stream]) -> Result<()> {
    let first = streams
        .iter()
        .flat_map(|s| s.clips.first())
        .next()
        .ok_or(Error::Empty("stream set"))?;
    let (f, h, wd, n) = (first.video.frames, first.video.height, first.video.width, first.waveform.len());
    w.write_all(MAGIC)?;
    for v in [streams.len(), f, h, wd, n] {
        w.write_all(&u32_of(v, "extent")?.to_le_bytes())?;
    }
    for s in streams {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&u32_of(s.clips.len(), "clip count")?.to_le_bytes())?;
        for c in &s.clips {
            if (c.video.frames, c.video.height, c.video.width, c.waveform.len()) != (f, h, wd, n) {
                return Err(Error::Config("all clips of a record file must share one geometry".into()));
            }
            w.write_all(&c.timestamp.to_le_bytes())?;
            w.write_all(&u32_of(c.concept, "concept")?.to_le_bytes())?;
            w.write_all(&u32_of(c.variant, "variant")?.to_le_bytes())?;
            match &c.text {
                Some(ids) => {
                    w.write_all(&u32_of(ids.len(), "text length")?.to_le_bytes())?;
                    for &id in ids {
                        w.write_all(&u32_of(id, "word id")?.to_le_bytes())?;
                    }
                }
                None => w.write_all(&ABSENT.to_le_bytes())?,
            }
            for v in c.video.data.iter().chain(&c.waveform) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

struct Reader<R>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0
            .read_exact(&mut b)
            .map_err(|e| Error::Config(format!("truncated record file: {e}")))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        (0..n).map(|_| Ok(f32::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_streams<R: Read>(r: R) -> Result<Vec<Stream>> {
    let mut r = Reader(r);
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Config("not a VATTSYN1 record file".into()));
    }
    let count = r.u32()? as usize;
    let (f, h, w, n) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let mut streams = Vec::with_capacity(count);
    for _ in 0..count {
        let id = u64::from_le_bytes(r.bytes()?);
        let clips_n = r.u32()? as usize;
        let mut clips = Vec::with_capacity(clips_n);
        for _ in 0..clips_n {
            let timestamp = f64::from_le_bytes(r.bytes()?);
            let concept = r.u32()? as usize;
            let variant = r.u32()? as usize;
            let len = r.u32()?;
            let text = if len == ABSENT {
                None
            } else {
                Some((0..len).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?)
            };
            let data = r.f32s(f * h * w * VIDEO_CHANNELS)?;
            let waveform = r.f32s(n)?;
            clips.push(ClipSample {
                video: VideoClip { frames: f, height: h, width: w, data },
                waveform,
                text,
                timestamp,
                concept,
                variant,
            });
        }
        streams.push(Stream { id, clips });
    }
    Ok(streams)
}
