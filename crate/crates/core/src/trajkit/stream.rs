//! Record framing for streaming trajectories to a monitor.
//!
//! A stream starts with magic `WMSTRM01` and five little-endian `u32`
//! (`H_img, W_img, C, p, d`). Each record is a `u32` timestep followed by the
//! image, proprio and action values of that step as little-endian `f32`,
//! in the same element order as the trajectory file.

use std::io::{self, Read, Write};

use super::{Action, Dims, State};
use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 8] = b"WMSTRM01";

/// A record that could not be turned into a valid `(State, Action)` pair.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameError {
    pub index: usize,
    pub t: Option<usize>,
    pub reason: String,
}

pub fn write_stream_header<W: Write>(w: &mut W, dims: Dims) -> io::Result<()> {
    w.write_all(STREAM_MAGIC)?;
    for v in [dims.h_img, dims.w_img, dims.c, dims.p, dims.d] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    Ok(())
}

pub fn write_stream_record<W: Write>(w: &mut W, state: &State, action: &Action) -> io::Result<()> {
    w.write_all(&(state.t as u32).to_le_bytes())?;
    for x in state.image.iter().chain(&state.proprio).chain(&action.delta) {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub struct StreamReader<R> {
    inner: R,
    dims: Dims,
    index: usize,
    done: bool,
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => break,
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(got)
}

impl<R: Read> StreamReader<R> {
    /// Reads the stream header. An empty input yields a reader with no records.
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; 28];
        let n = read_full(&mut inner, &mut head).map_err(|e| Error::io("<stream>", e))?;
        if n == 0 {
            return Ok(StreamReader {
                inner,
                dims: Dims::DEFAULT,
                index: 0,
                done: true,
            });
        }
        if n < 8 || &head[..8] != STREAM_MAGIC {
            return Err(Error::Format {
                path: "<stream>".into(),
                reason: "bad stream magic".into(),
            });
        }
        if n < head.len() {
            return Err(Error::Corrupt {
                path: "<stream>".into(),
                offset: n as u64,
                reason: "truncated stream header".into(),
            });
        }
        let u = |i: usize| u32::from_le_bytes(head[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
        let dims = Dims {
            h_img: u(0),
            w_img: u(1),
            c: u(2),
            p: u(3),
            d: u(4),
        };
        if dims != Dims::DEFAULT {
            return Err(Error::Format {
                path: "<stream>".into(),
                reason: format!("unsupported stream dims {dims:?}"),
            });
        }
        Ok(StreamReader {
            inner,
            dims,
            index: 0,
            done: false,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
}

impl<R: Read> Iterator for StreamReader<R> {
    type Item = std::result::Result<(State, Action), FrameError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let d = self.dims;
        let n_f = d.image_len() + d.p + d.d;
        let mut buf = vec![0u8; 4 + 4 * n_f];
        let index = self.index;
        self.index += 1;
        let got = match read_full(&mut self.inner, &mut buf) {
            Ok(g) => g,
            Err(e) => {
                self.done = true;
                return Some(Err(FrameError {
                    index,
                    t: None,
                    reason: format!("read error: {e}"),
                }));
            }
        };
        if got == 0 {
            self.done = true;
            return None;
        }
        let t = (got >= 4).then(|| u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize);
        if got < buf.len() {
            self.done = true;
            return Some(Err(FrameError {
                index,
                t,
                reason: format!("truncated record: {got} of {} bytes", buf.len()),
            }));
        }
        let vals: Vec<f32> = buf[4..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (img, rest) = vals.split_at(d.image_len());
        let (prop, act) = rest.split_at(d.p);
        let fail = |reason: &str| {
            Some(Err(FrameError {
                index,
                t,
                reason: reason.to_string(),
            }))
        };
        if img.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return fail("image value outside [0,1]");
        }
        if prop.iter().chain(act).any(|v| !v.is_finite()) {
            return fail("non-finite proprio or action");
        }
        Some(Ok((
            State {
                image: img.to_vec(),
                proprio: prop.to_vec(),
                t: t.unwrap_or(index),
            },
            Action { delta: act.to_vec() },
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::random_trajectory;
    use super::super::Mode;
    use super::*;

    #[test]
    fn empty_stream_has_no_records() {
        let r = StreamReader::new(&[][..]).unwrap();
        assert_eq!(r.count(), 0);
    }

    #[test]
    fn records_round_trip_and_bad_frames_are_isolated() {
        let tr = random_trajectory("s", 4, Mode::None, 5);
        let mut bytes = Vec::new();
        write_stream_header(&mut bytes, Dims::DEFAULT).unwrap();
        for (i, (s, a)) in tr.states.iter().zip(&tr.actions).enumerate() {
            if i == 2 {
                let mut bad = s.clone();
                bad.image[0] = f32::NAN;
                write_stream_record(&mut bytes, &bad, a).unwrap();
            } else {
                write_stream_record(&mut bytes, s, a).unwrap();
            }
        }
        bytes.extend_from_slice(&[1, 2, 3]);
        let out: Vec<_> = StreamReader::new(&bytes[..]).unwrap().collect();
        assert_eq!(out.len(), 5);
        assert_eq!(out[0].as_ref().unwrap().0, tr.states[0]);
        assert!(out[2].is_err());
        assert_eq!(out[3].as_ref().unwrap().1, tr.actions[3]);
        assert!(out[4].as_ref().unwrap_err().reason.contains("truncated"));
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(StreamReader::new(&b"XXXXXXXXaaaaaaaaaaaaaaaaaaaa"[..]).is_err());
    }
}
