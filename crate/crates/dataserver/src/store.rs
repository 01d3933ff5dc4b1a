//! Shared in-memory state behind every connection.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

pub const DEFAULT_MEM_CAP: u64 = 2 << 30;

#[derive(Clone, Debug)]
enum Entry {
    /// Payloads are immutable once stored; readers clone the `Arc` and never
    /// see a partially written value.
    Blob { version: u64, data: Arc<Vec<u8>> },
    Counter(u64),
}

impl Entry {
    fn version(&self) -> u64 {
        match self {
            Entry::Blob { version, .. } => *version,
            Entry::Counter(v) => *v,
        }
    }

    fn bytes(&self) -> u64 {
        match self {
            Entry::Blob { data, .. } => data.len() as u64,
            Entry::Counter(_) => 8,
        }
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum StoreError {
    Capacity,
    /// INCR/WAIT on a key that holds a blob.
    NotACounter,
}

#[derive(Debug, PartialEq, Eq)]
pub enum WaitOutcome {
    Reached(u64),
    TimedOut,
}

#[derive(Default)]
struct Inner {
    map: HashMap<String, Entry>,
    used: u64,
}

pub struct Store {
    inner: RwLock<Inner>,
    mem_cap: u64,
    /// Counter updates bump this under its lock before notifying, so a
    /// waiter that checked a stale value cannot miss the wakeup.
    signal: Mutex<u64>,
    changed: Condvar,
}

impl Store {
    pub fn new(mem_cap: u64) -> Self {
        Store {
            inner: RwLock::new(Inner::default()),
            mem_cap,
            signal: Mutex::new(0),
            changed: Condvar::new(),
        }
    }

    pub fn mem_cap(&self) -> u64 {
        self.mem_cap
    }

    pub fn used_bytes(&self) -> u64 {
        self.inner.read().used
    }

    /// Stores a payload; returns the new version (previous + 1, 1 for a new
    /// or deleted key).
    pub fn set(&self, key: String, payload: Vec<u8>) -> Result<u64, StoreError> {
        let size = key.len() as u64 + payload.len() as u64;
        let data = Arc::new(payload);
        let mut inner = self.inner.write();
        let old = inner.map.get(&key).map(|e| (e.version(), key.len() as u64 + e.bytes()));
        let (prev_version, prev_size) = old.unwrap_or((0, 0));
        let used = inner.used - prev_size + size;
        if used > self.mem_cap {
            return Err(StoreError::Capacity);
        }
        inner.used = used;
        let version = prev_version + 1;
        inner.map.insert(key, Entry::Blob { version, data });
        Ok(version)
    }

    /// Complete payload and version; counters read as their u64 LE value.
    pub fn get(&self, key: &str) -> Option<(Arc<Vec<u8>>, u64)> {
        match self.inner.read().map.get(key)? {
            Entry::Blob { version, data } => Some((Arc::clone(data), *version)),
            Entry::Counter(v) => Some((Arc::new(v.to_le_bytes().to_vec()), *v)),
        }
    }

    pub fn del(&self, key: &str) -> bool {
        let mut inner = self.inner.write();
        match inner.map.remove(key) {
            Some(e) => {
                inner.used -= key.len() as u64 + e.bytes();
                true
            }
            None => false,
        }
    }

    pub fn exists(&self, key: &str) -> bool {
        self.inner.read().map.contains_key(key)
    }

    /// Sorted keys starting with `prefix`, from one consistent snapshot.
    pub fn keys(&self, prefix: &str) -> Vec<String> {
        let mut keys: Vec<String> = {
            let inner = self.inner.read();
            inner.map.keys().filter(|k| k.starts_with(prefix)).cloned().collect()
        };
        keys.sort_unstable();
        keys
    }

    pub fn incr(&self, key: &str) -> Result<u64, StoreError> {
        let value = {
            let mut inner = self.inner.write();
            let value = match inner.map.get_mut(key) {
                Some(Entry::Counter(v)) => {
                    *v += 1;
                    *v
                }
                Some(Entry::Blob { .. }) => return Err(StoreError::NotACounter),
                None => {
                    let size = key.len() as u64 + 8;
                    if inner.used + size > self.mem_cap {
                        return Err(StoreError::Capacity);
                    }
                    inner.used += size;
                    inner.map.insert(key.to_string(), Entry::Counter(1));
                    1
                }
            };
            value
        };
        *self.signal.lock() += 1;
        self.changed.notify_all();
        Ok(value)
    }

    fn counter_value(&self, key: &str) -> Result<u64, StoreError> {
        match self.inner.read().map.get(key) {
            Some(Entry::Counter(v)) => Ok(*v),
            Some(Entry::Blob { .. }) => Err(StoreError::NotACounter),
            None => Ok(0),
        }
    }

    /// Blocks until the counter at `key` reaches `min_value` (a missing key
    /// counts as 0) or `timeout` elapses.
    pub fn wait_for(&self, key: &str, min_value: u64, timeout: Duration) -> Result<WaitOutcome, StoreError> {
        let deadline = Instant::now() + timeout;
        let mut guard = self.signal.lock();
        loop {
            let v = self.counter_value(key)?;
            if v >= min_value {
                return Ok(WaitOutcome::Reached(v));
            }
            if self.changed.wait_until(&mut guard, deadline).timed_out() {
                let v = self.counter_value(key)?;
                return Ok(if v >= min_value {
                    WaitOutcome::Reached(v)
                } else {
                    WaitOutcome::TimedOut
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn versions_and_accounting() {
        let s = Store::new(100);
        assert_eq!(s.set("a".into(), vec![1; 10]).unwrap(), 1);
        assert_eq!(s.set("a".into(), vec![2; 20]).unwrap(), 2);
        assert_eq!(s.used_bytes(), 21);
        assert_eq!(s.set("b".into(), vec![0; 100]), Err(StoreError::Capacity));
        assert!(s.del("a"));
        assert_eq!(s.used_bytes(), 0);
        assert_eq!(s.set("a".into(), vec![]).unwrap(), 1);
    }

    #[test]
    fn counters() {
        let s = Store::new(DEFAULT_MEM_CAP);
        assert_eq!(s.incr("c").unwrap(), 1);
        assert_eq!(s.incr("c").unwrap(), 2);
        assert_eq!(s.get("c").unwrap().0.as_slice(), 2u64.to_le_bytes());
        s.set("blob".into(), vec![1]).unwrap();
        assert_eq!(s.incr("blob"), Err(StoreError::NotACounter));
        assert_eq!(s.wait_for("c", 2, Duration::ZERO).unwrap(), WaitOutcome::Reached(2));
        assert_eq!(
            s.wait_for("c", 3, Duration::from_millis(20)).unwrap(),
            WaitOutcome::TimedOut
        );
    }

    #[test]
    fn keys_sorted_by_prefix() {
        let s = Store::new(DEFAULT_MEM_CAP);
        for k in ["grad/w2", "weights/g", "grad/w1"] {
            s.set(k.into(), vec![]).unwrap();
        }
        assert_eq!(s.keys("grad/"), ["grad/w1", "grad/w2"]);
        assert!(s.keys("zzz").is_empty());
    }
}
