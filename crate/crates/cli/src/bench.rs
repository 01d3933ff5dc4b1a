//! Data server vs per-file chip loading.
//!
//! Both paths iterate every chip once and end with decoded image and mask
//! tensors ready for the model. The file path starts from a cold page cache
//! (files are synced, then dropped from the cache) as a training job reading
//! a dataset too large to stay cached would.

use std::fs::{self, File};
use std::io::Read;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use shipnet_core::chipgen::ChipSpec;
use shipnet_core::Tensor;
use shipnet_dataserver::Client;
use shipnet_train::dataset::{decode_chip_file, export_files, populate, ChipSource};
use shipnet_train::harness::connect;

use crate::error::{CliError, CliResult};

pub const BENCH_PREFIX: &str = "bench/";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub count: u64,
    pub server_s: f64,
    pub file_s: f64,
    /// `file_s / server_s`; undefined without chips.
    pub ratio: Option<f64>,
    /// Both paths produced bit-identical tensors for every chip.
    pub identical: bool,
}

impl BenchRow {
    pub fn render(&self) -> String {
        let ratio = self.ratio.map_or_else(|| "n/a".to_string(), |r| format!("{r:.1}x"));
        format!(
            "File Serving Time Comparison ({} chips)\n{:<12} {:>12}\n{:<12} {:>12.6}\n{:<12} {:>12.6}\nratio file:server {ratio}\nbit-identical: {}\n",
            self.count, "Method", "Seconds", "Data server", self.server_s, "Per-file", self.file_s, self.identical
        )
    }
}

fn checksums(chips: Vec<(Tensor, Tensor)>) -> Vec<u32> {
    chips
        .into_iter()
        .map(|(img, mask)| {
            let bytes: Vec<u8> = img.data().iter().chain(mask.data()).flat_map(|v| v.to_le_bytes()).collect();
            crc32fast::hash(&bytes)
        })
        .collect()
}

/// Drops clean cached pages of `path` so the next read goes to the device.
fn evict(path: &Path) -> std::io::Result<()> {
    let f = File::open(path)?;
    f.sync_all()?;
    #[cfg(target_os = "linux")]
    {
        use std::os::unix::io::AsRawFd;
        // SAFETY: the descriptor is open for the duration of the call.
        let rc = unsafe { libc::posix_fadvise(f.as_raw_fd(), 0, 0, libc::POSIX_FADV_DONTNEED) };
        if rc != 0 {
            return Err(std::io::Error::from_raw_os_error(rc));
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> CliResult<(Tensor, Tensor)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    Ok(decode_chip_file(&bytes)?)
}

/// Populates `count` chips on the server at `addr`, exports the same chips
/// under `dir`, and times a full pass over each.
pub fn bench_io(addr: SocketAddr, spec: &ChipSpec, count: u64, dir: &Path) -> CliResult<BenchRow> {
    let mut client: Client = connect(addr)?;
    let keys = populate(&mut client, spec, 0..count, BENCH_PREFIX)?;
    fs::create_dir_all(dir)?;
    let files: Vec<PathBuf> = export_files(spec, 0..count, dir)?;
    for f in &files {
        evict(f)?;
    }

    if count == 0 {
        return Ok(BenchRow {
            count,
            server_s: 0.0,
            file_s: 0.0,
            ratio: None,
            identical: true,
        });
    }

    // Tensors are kept and checksummed after the clock stops.
    let t0 = Instant::now();
    let mut from_server = Vec::with_capacity(keys.len());
    for k in &keys {
        let chip = client
            .chip(k)?
            .ok_or_else(|| CliError::Runtime(format!("chip {k} vanished from the server")))?;
        from_server.push(chip);
    }
    let server_s = t0.elapsed().as_secs_f64();
    let server_sums = checksums(from_server);

    let t0 = Instant::now();
    let mut from_files = Vec::with_capacity(files.len());
    for f in &files {
        from_files.push(read_file(f)?);
    }
    let file_s = t0.elapsed().as_secs_f64();
    let file_sums = checksums(from_files);

    for k in &keys {
        client.del(&shipnet_train::dataset::img_key(k))?;
        client.del(&shipnet_train::dataset::mask_key(k))?;
    }
    Ok(BenchRow {
        count,
        server_s,
        file_s,
        ratio: (server_s > 0.0).then(|| file_s / server_s),
        identical: server_sums == file_sums,
    })
}
