//! TCP front end: one thread per connection, commands processed in order.

use std::collections::HashMap;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use parking_lot::Mutex;

use crate::protocol::{read_request, Incoming, Request, Status};
use crate::store::{Store, StoreError, WaitOutcome, DEFAULT_MEM_CAP};

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub max_clients: usize,
    pub mem_cap: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            max_clients: 10_000,
            mem_cap: DEFAULT_MEM_CAP,
        }
    }
}

struct Shared {
    store: Store,
    config: ServerConfig,
    stopping: AtomicBool,
    next_id: AtomicU64,
    connections: Mutex<HashMap<u64, TcpStream>>,
}

/// A running server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn store(&self) -> &Store {
        &self.shared.store
    }

    pub fn active_connections(&self) -> usize {
        self.shared.connections.lock().len()
    }

    /// Stops accepting, closes every open connection and joins the acceptor.
    pub fn shutdown(&mut self) {
        if self.shared.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        for (_, s) in self.shared.connections.lock().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Blocks until the server stops (used by the standalone binary).
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn serve(bind: impl ToSocketAddrs, config: ServerConfig) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        store: Store::new(config.mem_cap),
        config,
        stopping: AtomicBool::new(false),
        next_id: AtomicU64::new(0),
        connections: Mutex::new(HashMap::new()),
    });
    let acc_shared = Arc::clone(&shared);
    let acceptor = thread::Builder::new()
        .name("dataserver-accept".into())
        .spawn(move || accept_loop(listener, acc_shared))?;
    Ok(ServerHandle {
        addr,
        shared,
        acceptor: Some(acceptor),
    })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.stopping.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = stream else { continue };
        if shared.connections.lock().len() >= shared.config.max_clients {
            let _ = stream.shutdown(Shutdown::Both);
            continue;
        }
        let _ = stream.set_nodelay(true);
        let id = shared.next_id.fetch_add(1, Ordering::Relaxed);
        let Ok(registered) = stream.try_clone() else { continue };
        shared.connections.lock().insert(id, registered);
        let conn_shared = Arc::clone(&shared);
        let spawned = thread::Builder::new()
            .name(format!("dataserver-conn-{id}"))
            .spawn(move || {
                let _ = handle_connection(stream, &conn_shared);
                conn_shared.connections.lock().remove(&id);
            });
        if spawned.is_err() {
            shared.connections.lock().remove(&id);
        }
    }
}

fn handle_connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut reader = BufReader::with_capacity(1 << 16, stream.try_clone()?);
    let mut writer = BufWriter::with_capacity(1 << 16, stream);
    let store = &shared.store;
    loop {
        let incoming = match read_request(&mut reader, store.mem_cap())? {
            Some(i) => i,
            None => return Ok(()),
        };
        match incoming {
            Incoming::Malformed(_) => writer.write_all(&[Status::Malformed as u8])?,
            Incoming::OverCapacity => writer.write_all(&[Status::Capacity as u8])?,
            Incoming::Request(req) => respond(&mut writer, store, req)?,
        }
        writer.flush()?;
    }
}

fn respond(w: &mut impl Write, store: &Store, req: Request) -> io::Result<()> {
    let status = |w: &mut dyn Write, s: Status| w.write_all(&[s as u8]);
    match req {
        Request::Set { key, payload } => match store.set(key, payload) {
            Ok(version) => {
                status(w, Status::Ok)?;
                w.write_all(&version.to_le_bytes())
            }
            Err(_) => status(w, Status::Capacity),
        },
        Request::Get { key } => match store.get(&key) {
            Some((data, version)) => {
                status(w, Status::Ok)?;
                w.write_all(&version.to_le_bytes())?;
                w.write_all(&(data.len() as u64).to_le_bytes())?;
                w.write_all(&data)
            }
            None => status(w, Status::NotFound),
        },
        Request::Del { key } => status(w, if store.del(&key) { Status::Ok } else { Status::NotFound }),
        Request::Exists { key } => {
            status(w, Status::Ok)?;
            w.write_all(&[store.exists(&key) as u8])
        }
        Request::Keys { prefix } => {
            let keys = store.keys(&prefix);
            status(w, Status::Ok)?;
            w.write_all(&(keys.len() as u32).to_le_bytes())?;
            for k in keys {
                w.write_all(&(k.len() as u16).to_le_bytes())?;
                w.write_all(k.as_bytes())?;
            }
            Ok(())
        }
        Request::Incr { key } => match store.incr(&key) {
            Ok(v) => {
                status(w, Status::Ok)?;
                w.write_all(&v.to_le_bytes())
            }
            Err(StoreError::Capacity) => status(w, Status::Capacity),
            Err(StoreError::NotACounter) => status(w, Status::Malformed),
        },
        Request::Wait {
            key,
            min_value,
            timeout_ms,
        } => match store.wait_for(&key, min_value, Duration::from_millis(timeout_ms)) {
            Ok(WaitOutcome::Reached(v)) => {
                status(w, Status::Ok)?;
                w.write_all(&v.to_le_bytes())
            }
            Ok(WaitOutcome::TimedOut) => status(w, Status::Timeout),
            Err(_) => status(w, Status::Malformed),
        },
    }
}
