//! Reserved key namespace on the data server.

pub const TRAIN_PREFIX: &str = "chip/";
pub const VAL_PREFIX: &str = "val/";
pub const TARGET_PREFIX: &str = "target/";

pub const WEIGHTS_GLOBAL: &str = "weights/global";
pub const WEIGHTS_VERSION: &str = "weights/version";
pub const EPOCH_COMPLETE: &str = "epoch/complete";
pub const PSV_PUSHED: &str = "psv/pushed";
pub const PSV_WORKERS_DONE: &str = "psv/workers_done";
pub const RUN_FINISHED: &str = "run/finished";
pub const RUN_ABORT: &str = "run/abort";

pub const TASK_REQ_PREFIX: &str = "task/req/";
pub const TASK_TICKET: &str = "task/ticket";
pub const TASK_PENDING: &str = "task/pending";
pub const TASK_PROGRESS: &str = "task/progress";

pub fn grad(worker: &str) -> String {
    format!("grad/{worker}")
}

/// Bumped by the primary once the worker's bundle has been applied.
pub fn signal(worker: &str) -> String {
    format!("signal/{worker}")
}

/// `task/req/<ticket>/<worker>/<seq>`; the zero-padded ticket makes the
/// sorted listing equal arrival order.
pub fn task_request(ticket: u64, worker: &str, seq: u32) -> String {
    format!("{TASK_REQ_PREFIX}{ticket:012}/{worker}/{seq}")
}

pub fn task_response(worker: &str, seq: u32) -> String {
    format!("task/resp/{worker}/{seq}")
}

/// Bumped by the scheduler whenever it answers one of the worker's requests.
pub fn task_signal(worker: &str) -> String {
    format!("task/signal/{worker}")
}

pub fn task_seq(worker: &str) -> String {
    format!("task/seq/{worker}")
}

pub fn task_worker(worker: &str) -> String {
    format!("task/workers/{worker}")
}

/// Splits a request row key into (ticket, worker, seq).
pub fn parse_task_request(key: &str) -> Option<(u64, String, u32)> {
    let rest = key.strip_prefix(TASK_REQ_PREFIX)?;
    let mut parts = rest.splitn(2, '/');
    let ticket = parts.next()?.parse().ok()?;
    let tail = parts.next()?;
    let (worker, seq) = tail.rsplit_once('/')?;
    if worker.is_empty() || worker.contains('/') {
        return None;
    }
    Some((ticket, worker.to_string(), seq.parse().ok()?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_key_roundtrip() {
        let k = task_request(42, "Worker_003", 7);
        assert_eq!(k, "task/req/000000000042/Worker_003/7");
        assert_eq!(parse_task_request(&k), Some((42, "Worker_003".into(), 7)));
        assert_eq!(parse_task_request("task/req/x/w/1"), None);
        assert_eq!(parse_task_request("task/req/1/a/b/2"), None);
    }
}
