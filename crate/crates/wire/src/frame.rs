//! Frame codec.
//!
//! ```text
//! request:  len:u32 | request_id:u64 | opcode:u8 | body
//! response: len:u32 | request_id:u64 | status:u8 | body
//! body:     json_len:u32 | json | tail
//! ```
//!
//! Integers are little-endian. `len` counts body bytes only and may not
//! exceed [`MAX_FRAME`].

use std::io::{self, Read, Write};

use forge_core::api::{Request, Response};
use forge_core::Error;
use serde::{Deserialize, Serialize};

pub const MAX_FRAME: usize = 16 << 20;
pub const HEADER_LEN: usize = 13;
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERR: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub request_id: u64,
    /// Opcode on requests, status on responses.
    pub code: u8,
    pub json: Vec<u8>,
    pub tail: Vec<u8>,
}

#[derive(Debug, thiserror::Error)]
pub enum FrameError {
    /// Clean end of stream on a frame boundary.
    #[error("connection closed")]
    Closed,
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("frame body of {len} bytes exceeds the {MAX_FRAME}-byte limit")]
    TooLarge { request_id: u64, len: usize },
    #[error("malformed frame: {message}")]
    Malformed { request_id: u64, message: String },
}

impl Frame {
    pub fn body_len(&self) -> usize {
        4 + self.json.len() + self.tail.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let len = self.body_len();
        if len > MAX_FRAME {
            return Err(FrameError::TooLarge {
                request_id: self.request_id,
                len,
            });
        }
        let mut out = Vec::with_capacity(HEADER_LEN + len);
        out.extend_from_slice(&(len as u32).to_le_bytes());
        out.extend_from_slice(&self.request_id.to_le_bytes());
        out.push(self.code);
        out.extend_from_slice(&(self.json.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.json);
        out.extend_from_slice(&self.tail);
        Ok(out)
    }
}

/// Writes the whole frame with one `write_all`, so frames from different
/// threads never interleave as long as the writer is locked around it.
pub fn write_frame(w: &mut impl Write, f: &Frame) -> Result<(), FrameError> {
    let bytes = f.encode()?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn read_frame(r: &mut impl Read) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(FrameError::Closed),
            Ok(0) => return Err(io::Error::from(io::ErrorKind::UnexpectedEof).into()),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[0..4].try_into().expect("4 bytes")) as usize;
    let request_id = u64::from_le_bytes(header[4..12].try_into().expect("8 bytes"));
    let code = header[12];
    if len > MAX_FRAME {
        return Err(FrameError::TooLarge { request_id, len });
    }
    if len < 4 {
        return Err(FrameError::Malformed {
            request_id,
            message: format!("body of {len} bytes has no json length"),
        });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)?;
    let json_len = u32::from_le_bytes(body[0..4].try_into().expect("4 bytes")) as usize;
    if json_len > len - 4 {
        return Err(FrameError::Malformed {
            request_id,
            message: format!("json length {json_len} overruns a {len}-byte body"),
        });
    }
    let tail = body.split_off(4 + json_len);
    body.drain(..4);
    Ok(Frame {
        request_id,
        code,
        json: body,
        tail,
    })
}

/// Error frame body. `error` carries the full structured error so a client
/// can rebuild exactly what a local call would have returned.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: u16,
    pub kind: String,
    pub message: String,
    pub error: Option<Error>,
}

impl ErrorBody {
    pub fn new(e: &Error) -> Self {
        ErrorBody {
            code: e.code(),
            kind: e.kind().to_owned(),
            message: e.to_string(),
            error: Some(e.clone()),
        }
    }

    pub fn into_error(self) -> Error {
        self.error.unwrap_or(Error::Protocol(format!(
            "remote error {} ({}): {}",
            self.code, self.kind, self.message
        )))
    }
}

pub fn request_frame(request_id: u64, req: Request) -> Result<Frame, Error> {
    let (code, args, tail) = req.into_parts()?;
    Ok(Frame {
        request_id,
        code,
        json: serde_json::to_vec(&args)?,
        tail,
    })
}

/// Decodes a request. The outer error means the frame is malformed and the
/// connection should be dropped; the inner one is an ordinary per-request
/// error (unknown opcode, bad arguments).
pub fn decode_request(f: Frame) -> Result<Result<Request, Error>, String> {
    let args: serde_json::Value =
        serde_json::from_slice(&f.json).map_err(|e| format!("request body is not json: {e}"))?;
    if !args.is_object() {
        return Err("request arguments must be a json object".into());
    }
    Ok(Request::from_parts(f.code, args, f.tail))
}

pub fn response_frame(request_id: u64, result: Result<Response, Error>) -> Frame {
    let encoded = result.and_then(|mut r| {
        let tail = r.take_tail();
        Ok((serde_json::to_vec(&r)?, tail))
    });
    match encoded {
        Ok((json, tail)) => Frame {
            request_id,
            code: STATUS_OK,
            json,
            tail,
        },
        Err(e) => error_frame(request_id, &e),
    }
}

pub fn error_frame(request_id: u64, e: &Error) -> Frame {
    Frame {
        request_id,
        code: STATUS_ERR,
        json: serde_json::to_vec(&ErrorBody::new(e)).expect("error body serializes"),
        tail: Vec::new(),
    }
}

pub fn decode_response(f: Frame) -> Result<Response, Error> {
    match f.code {
        STATUS_OK => {
            let mut r: Response = serde_json::from_slice(&f.json)
                .map_err(|e| Error::Protocol(format!("bad response body: {e}")))?;
            r.set_tail(f.tail)?;
            Ok(r)
        }
        STATUS_ERR => {
            let body: ErrorBody = serde_json::from_slice(&f.json)
                .map_err(|e| Error::Protocol(format!("bad error body: {e}")))?;
            Err(body.into_error())
        }
        s => Err(Error::Protocol(format!("unknown response status {s}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trips() {
        let f = Frame {
            request_id: 7,
            code: 3,
            json: b"{\"key\":\"a\"}".to_vec(),
            tail: vec![1, 2, 3],
        };
        let bytes = f.encode().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + f.body_len());
        assert_eq!(read_frame(&mut &bytes[..]).unwrap(), f);
    }

    #[test]
    fn oversized_header_is_rejected_before_reading_the_body() {
        let mut bytes = ((MAX_FRAME + 1) as u32).to_le_bytes().to_vec();
        bytes.extend_from_slice(&9u64.to_le_bytes());
        bytes.push(0);
        match read_frame(&mut &bytes[..]) {
            Err(FrameError::TooLarge { request_id: 9, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_length_must_fit_the_body() {
        let mut bytes = 6u32.to_le_bytes().to_vec();
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.push(0);
        bytes.extend_from_slice(&10u32.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        assert!(matches!(read_frame(&mut &bytes[..]), Err(FrameError::Malformed { .. })));
    }

    #[test]
    fn errors_survive_the_trip() {
        let e = Error::InvalidPlan {
            line: 3,
            field: "tasks[0].kind".into(),
            message: "bad".into(),
        };
        let f = error_frame(1, &e);
        assert_eq!(decode_response(f).unwrap_err(), e);
    }
}
