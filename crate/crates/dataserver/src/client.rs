//! Blocking single-connection client; one command in flight at a time.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use shipnet_core::Tensor;

use crate::protocol::{read_u16, read_u32, read_u64, read_u8, write_header, Opcode, Status, MAX_KEY_LEN};

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("server rejected the request as malformed")]
    Malformed,
    #[error("server memory cap reached")]
    Capacity,
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("payload decode: {0}")]
    Decode(#[from] shipnet_core::Error),
}

pub type Result<T> = std::result::Result<T, ClientError>;

pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    peer: SocketAddr,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(Client {
            reader: BufReader::with_capacity(1 << 16, stream.try_clone()?),
            writer: BufWriter::with_capacity(1 << 16, stream),
            peer,
        })
    }

    /// Retries until the server accepts or `timeout` elapses.
    pub fn connect_retry(addr: impl ToSocketAddrs + Clone, timeout: Duration) -> Result<Client> {
        let deadline = Instant::now() + timeout;
        loop {
            match Client::connect(addr.clone()) {
                Ok(c) => return Ok(c),
                Err(e) if Instant::now() >= deadline => return Err(e),
                Err(_) => thread::sleep(Duration::from_millis(20)),
            }
        }
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    fn send(&mut self, op: Opcode, key: &str, body: &[&[u8]]) -> Result<Status> {
        if key.len() > u16::MAX as usize {
            return Err(ClientError::Protocol(format!("key of {} bytes cannot be framed", key.len())));
        }
        write_header(&mut self.writer, op, key)?;
        for part in body {
            self.writer.write_all(part)?;
        }
        self.writer.flush()?;
        let b = read_u8(&mut self.reader)?;
        let status = Status::from_u8(b).ok_or_else(|| ClientError::Protocol(format!("unknown status {b}")))?;
        match status {
            Status::Malformed => Err(ClientError::Malformed),
            Status::Capacity => Err(ClientError::Capacity),
            s => Ok(s),
        }
    }

    fn expect_ok(&self, s: Status, op: &str) -> Result<()> {
        if s == Status::Ok {
            Ok(())
        } else {
            Err(ClientError::Protocol(format!("unexpected {s:?} for {op}")))
        }
    }

    /// Stores a payload; returns its new version.
    pub fn set(&mut self, key: &str, payload: &[u8]) -> Result<u64> {
        let s = self.send(Opcode::Set, key, &[&(payload.len() as u64).to_le_bytes(), payload])?;
        self.expect_ok(s, "SET")?;
        Ok(read_u64(&mut self.reader)?)
    }

    /// Payload and version, or `None` when the key is absent.
    pub fn get(&mut self, key: &str) -> Result<Option<(Vec<u8>, u64)>> {
        let s = self.send(Opcode::Get, key, &[])?;
        if s == Status::NotFound {
            return Ok(None);
        }
        self.expect_ok(s, "GET")?;
        let version = read_u64(&mut self.reader)?;
        let len = read_u64(&mut self.reader)? as usize;
        let mut data = vec![0u8; len];
        self.reader.read_exact(&mut data)?;
        Ok(Some((data, version)))
    }

    /// True when a key was removed.
    pub fn del(&mut self, key: &str) -> Result<bool> {
        Ok(self.send(Opcode::Del, key, &[])? == Status::Ok)
    }

    pub fn exists(&mut self, key: &str) -> Result<bool> {
        let s = self.send(Opcode::Exists, key, &[])?;
        self.expect_ok(s, "EXISTS")?;
        Ok(read_u8(&mut self.reader)? != 0)
    }

    /// Lexicographically sorted keys with the given prefix.
    pub fn keys(&mut self, prefix: &str) -> Result<Vec<String>> {
        let s = self.send(Opcode::Keys, prefix, &[])?;
        self.expect_ok(s, "KEYS")?;
        let n = read_u32(&mut self.reader)? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u16(&mut self.reader)? as usize;
            if len > MAX_KEY_LEN {
                return Err(ClientError::Protocol(format!("listed key of {len} bytes")));
            }
            let mut b = vec![0u8; len];
            self.reader.read_exact(&mut b)?;
            out.push(String::from_utf8(b).map_err(|_| ClientError::Protocol("non utf-8 key".into()))?);
        }
        Ok(out)
    }

    pub fn incr(&mut self, key: &str) -> Result<u64> {
        let s = self.send(Opcode::Incr, key, &[])?;
        self.expect_ok(s, "INCR")?;
        Ok(read_u64(&mut self.reader)?)
    }

    /// Current value of a counter; 0 when absent.
    pub fn counter(&mut self, key: &str) -> Result<u64> {
        match self.get(key)? {
            None => Ok(0),
            Some((bytes, _)) => {
                let arr: [u8; 8] = bytes
                    .as_slice()
                    .try_into()
                    .map_err(|_| ClientError::Protocol(format!("{key} is not a counter")))?;
                Ok(u64::from_le_bytes(arr))
            }
        }
    }

    /// Blocks server-side until the counter reaches `min_value`. `None` on
    /// timeout.
    pub fn wait_for(&mut self, key: &str, min_value: u64, timeout: Duration) -> Result<Option<u64>> {
        let ms = timeout.as_millis().min(u64::MAX as u128) as u64;
        let s = self.send(Opcode::Wait, key, &[&min_value.to_le_bytes(), &ms.to_le_bytes()])?;
        if s == Status::Timeout {
            return Ok(None);
        }
        self.expect_ok(s, "WAIT")?;
        Ok(Some(read_u64(&mut self.reader)?))
    }

    pub fn set_tensor(&mut self, key: &str, t: &Tensor) -> Result<u64> {
        self.set(key, &t.to_bytes())
    }

    pub fn get_tensor(&mut self, key: &str) -> Result<Option<(Tensor, u64)>> {
        match self.get(key)? {
            None => Ok(None),
            Some((bytes, v)) => Ok(Some((Tensor::from_bytes(&bytes)?, v))),
        }
    }
}
