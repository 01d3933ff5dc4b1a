//! Wire format.
//!
//! Request frame: `"TSRV"`, u8 opcode, u16 key length, key bytes, then an
//! opcode-specific body. Response: u8 status, then a body that is present
//! only when the status is [`Status::Ok`]. Integers are little-endian.
//!
//! | opcode   | request body              | ok response body                    |
//! |----------|---------------------------|-------------------------------------|
//! | 1 SET    | u64 len, payload          | u64 version                         |
//! | 2 GET    | -                         | u64 version, u64 len, payload       |
//! | 3 DEL    | -                         | -                                   |
//! | 4 EXISTS | -                         | u8 (0 or 1)                         |
//! | 5 KEYS   | - (key is the prefix)     | u32 count, count x (u16 len, key)   |
//! | 6 INCR   | -                         | u64 new value                       |
//! | 7 WAIT   | u64 min value, u64 ms     | u64 value                           |

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 4] = b"TSRV";
pub const MAX_KEY_LEN: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Opcode {
    Set = 1,
    Get = 2,
    Del = 3,
    Exists = 4,
    Keys = 5,
    Incr = 6,
    Wait = 7,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Option<Opcode> {
        Some(match v {
            1 => Opcode::Set,
            2 => Opcode::Get,
            3 => Opcode::Del,
            4 => Opcode::Exists,
            5 => Opcode::Keys,
            6 => Opcode::Incr,
            7 => Opcode::Wait,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    NotFound = 1,
    Malformed = 2,
    Timeout = 3,
    Capacity = 4,
}

impl Status {
    pub fn from_u8(v: u8) -> Option<Status> {
        Some(match v {
            0 => Status::Ok,
            1 => Status::NotFound,
            2 => Status::Malformed,
            3 => Status::Timeout,
            4 => Status::Capacity,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Request {
    Set { key: String, payload: Vec<u8> },
    Get { key: String },
    Del { key: String },
    Exists { key: String },
    Keys { prefix: String },
    Incr { key: String },
    Wait { key: String, min_value: u64, timeout_ms: u64 },
}

/// Result of reading one frame from a connection.
#[derive(Debug)]
pub enum Incoming {
    Request(Request),
    /// The frame was consumed but is invalid; answer with status 2.
    Malformed(String),
    /// A SET whose payload was discarded because it cannot fit.
    OverCapacity,
}

pub fn write_header(w: &mut impl Write, op: Opcode, key: &str) -> io::Result<()> {
    if key.len() > u16::MAX as usize {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "key longer than 65535 bytes"));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[op as u8])?;
    w.write_all(&(key.len() as u16).to_le_bytes())?;
    w.write_all(key.as_bytes())
}

pub fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn discard(r: &mut impl Read, n: u64) -> io::Result<()> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(())
}

/// Reads one frame. `Ok(None)` is a clean end of stream before a frame
/// starts. `max_payload` bounds SET payloads that are buffered; larger ones
/// are drained from the socket and reported as [`Incoming::OverCapacity`].
pub fn read_request(r: &mut impl Read, max_payload: u64) -> io::Result<Option<Incoming>> {
    let mut magic = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut magic[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    if &magic != MAGIC {
        return Ok(Some(Incoming::Malformed("bad magic".into())));
    }
    let op_byte = read_u8(r)?;
    let key_len = read_u16(r)? as usize;
    let mut key_bytes = vec![0u8; key_len];
    r.read_exact(&mut key_bytes)?;
    let Some(op) = Opcode::from_u8(op_byte) else {
        return Ok(Some(Incoming::Malformed(format!("unknown opcode {op_byte}"))));
    };

    // Consume the body before validating the key so the stream stays framed.
    let mut payload = None;
    let mut wait = (0, 0);
    match op {
        Opcode::Set => {
            let len = read_u64(r)?;
            if len > max_payload {
                discard(r, len)?;
                return Ok(Some(Incoming::OverCapacity));
            }
            let mut buf = vec![0u8; len as usize];
            r.read_exact(&mut buf)?;
            payload = Some(buf);
        }
        Opcode::Wait => wait = (read_u64(r)?, read_u64(r)?),
        _ => {}
    }

    if key_len > MAX_KEY_LEN {
        return Ok(Some(Incoming::Malformed(format!("key of {key_len} bytes exceeds {MAX_KEY_LEN}"))));
    }
    let key = match String::from_utf8(key_bytes) {
        Ok(k) => k,
        Err(_) => return Ok(Some(Incoming::Malformed("key is not utf-8".into()))),
    };
    let req = match op {
        Opcode::Set => Request::Set {
            key,
            payload: payload.unwrap_or_default(),
        },
        Opcode::Get => Request::Get { key },
        Opcode::Del => Request::Del { key },
        Opcode::Exists => Request::Exists { key },
        Opcode::Keys => Request::Keys { prefix: key },
        Opcode::Incr => Request::Incr { key },
        Opcode::Wait => Request::Wait {
            key,
            min_value: wait.0,
            timeout_ms: wait.1,
        },
    };
    Ok(Some(Incoming::Request(req)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn frame(op: u8, key: &[u8], body: &[u8]) -> Vec<u8> {
        let mut f = MAGIC.to_vec();
        f.push(op);
        f.extend((key.len() as u16).to_le_bytes());
        f.extend(key);
        f.extend(body);
        f
    }

    #[test]
    fn parses_set_and_wait() {
        let mut body = 3u64.to_le_bytes().to_vec();
        body.extend([7, 8, 9]);
        let mut bytes = frame(1, b"k", &body);
        let mut wb = 5u64.to_le_bytes().to_vec();
        wb.extend(100u64.to_le_bytes());
        bytes.extend(frame(7, b"c", &wb));
        let mut cur = Cursor::new(bytes);
        match read_request(&mut cur, 1 << 20).unwrap().unwrap() {
            Incoming::Request(Request::Set { key, payload }) => {
                assert_eq!(key, "k");
                assert_eq!(payload, [7, 8, 9]);
            }
            other => panic!("{other:?}"),
        }
        match read_request(&mut cur, 1 << 20).unwrap().unwrap() {
            Incoming::Request(r) => assert_eq!(
                r,
                Request::Wait {
                    key: "c".into(),
                    min_value: 5,
                    timeout_ms: 100
                }
            ),
            other => panic!("{other:?}"),
        }
        assert!(read_request(&mut cur, 1 << 20).unwrap().is_none());
    }

    #[test]
    fn oversized_key_keeps_framing() {
        let long = vec![b'a'; MAX_KEY_LEN + 1];
        let mut bytes = frame(2, &long, &[]);
        bytes.extend(frame(4, b"x", &[]));
        let mut cur = Cursor::new(bytes);
        assert!(matches!(read_request(&mut cur, 0).unwrap(), Some(Incoming::Malformed(_))));
        assert!(matches!(
            read_request(&mut cur, 0).unwrap(),
            Some(Incoming::Request(Request::Exists { .. }))
        ));
    }

    #[test]
    fn over_capacity_payload_is_drained() {
        let mut body = 10u64.to_le_bytes().to_vec();
        body.extend([0u8; 10]);
        let mut bytes = frame(1, b"big", &body);
        bytes.extend(frame(3, b"y", &[]));
        let mut cur = Cursor::new(bytes);
        assert!(matches!(read_request(&mut cur, 4).unwrap(), Some(Incoming::OverCapacity)));
        assert!(matches!(
            read_request(&mut cur, 4).unwrap(),
            Some(Incoming::Request(Request::Del { .. }))
        ));
    }

    #[test]
    fn bad_magic_and_opcode() {
        let mut cur = Cursor::new(b"NOPE".to_vec());
        assert!(matches!(read_request(&mut cur, 0).unwrap(), Some(Incoming::Malformed(_))));
        let mut cur = Cursor::new(frame(99, b"k", &[]));
        assert!(matches!(read_request(&mut cur, 0).unwrap(), Some(Incoming::Malformed(_))));
    }
}
