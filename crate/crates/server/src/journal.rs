//! Append-only event log with periodic snapshots.
//!
//! Every event is written as one JSON line and synced to disk before the
//! caller applies it, so an acknowledged answer survives a crash. A snapshot
//! is the serialized store; it records how many log events it covers, and
//! recovery replays only the events after that point.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use softfer::study::{Event, StudyStore};

use crate::error::ServerError;

pub const LOG_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";

pub struct Journal {
    dir: PathBuf,
    file: File,
    events: u64,
    snapshot_every: u64,
    since_snapshot: u64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ServerError + '_ {
    move |source| ServerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

impl Journal {
    /// Opens (or creates) the journal in `dir` and rebuilds the store.
    /// A final line cut short by a crash is dropped; any other malformed
    /// line is an error.
    pub fn open(dir: &Path, snapshot_every: u64) -> Result<(Journal, StudyStore), ServerError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let snap_path = dir.join(SNAPSHOT_FILE);
        let mut store = if snap_path.exists() {
            let text = fs::read_to_string(&snap_path).map_err(io_err(&snap_path))?;
            serde_json::from_str::<StudyStore>(&text).map_err(|e| ServerError::Corrupt {
                path: snap_path.clone(),
                message: e.to_string(),
            })?
        } else {
            StudyStore::new()
        };
        let covered = store.events_applied;

        let log_path = dir.join(LOG_FILE);
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        let mut reader = BufReader::new(&file);
        let mut good_len = 0u64;
        let mut events = 0u64;
        let mut line = String::new();
        loop {
            line.clear();
            let n = reader.read_line(&mut line).map_err(io_err(&log_path))?;
            if n == 0 {
                break;
            }
            let complete = line.ends_with('\n');
            if complete && line.trim().is_empty() {
                good_len += n as u64;
                continue;
            }
            // Without its newline the record was never acknowledged.
            if !complete {
                log::warn!("{}: dropping torn final record", log_path.display());
                break;
            }
            let event: Event = serde_json::from_str(line.trim_end()).map_err(|e| ServerError::Corrupt {
                path: log_path.clone(),
                message: format!("record {}: {e}", events + 1),
            })?;
            if events >= covered {
                store.apply(&event).map_err(|e| ServerError::Corrupt {
                    path: log_path.clone(),
                    message: format!("record {}: {e}", events + 1),
                })?;
            }
            events += 1;
            good_len += n as u64;
        }
        drop(reader);
        if events < covered {
            return Err(ServerError::Corrupt {
                path: log_path,
                message: format!("snapshot covers {covered} events but the log holds {events}"),
            });
        }
        let len = file.metadata().map_err(io_err(&log_path))?.len();
        if len != good_len {
            file.set_len(good_len).map_err(io_err(&log_path))?;
            file.sync_all().map_err(io_err(&log_path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(&log_path))?;
        log::info!(
            "recovered {events} events ({} from snapshot) in {}",
            covered,
            dir.display()
        );
        Ok((
            Journal {
                dir: dir.to_path_buf(),
                file,
                events,
                snapshot_every,
                since_snapshot: events - covered,
            },
            store,
        ))
    }

    /// Appends one event and syncs it to disk.
    pub fn append(&mut self, event: &Event) -> Result<(), ServerError> {
        let mut line = serde_json::to_vec(event).expect("events serialize");
        line.push(b'\n');
        let path = self.dir.join(LOG_FILE);
        self.file.write_all(&line).map_err(io_err(&path))?;
        self.file.sync_data().map_err(io_err(&path))?;
        self.events += 1;
        self.since_snapshot += 1;
        Ok(())
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    /// Writes a snapshot if enough events have accumulated since the last.
    /// `store` must already reflect every appended event.
    pub fn maybe_snapshot(&mut self, store: &StudyStore) -> Result<bool, ServerError> {
        if self.snapshot_every == 0 || self.since_snapshot < self.snapshot_every {
            return Ok(false);
        }
        self.snapshot(store)?;
        Ok(true)
    }

    pub fn snapshot(&mut self, store: &StudyStore) -> Result<(), ServerError> {
        debug_assert_eq!(store.events_applied, self.events);
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        let bytes = serde_json::to_vec(store).expect("store serializes");
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, &path).map_err(io_err(&path))?;
        self.since_snapshot = 0;
        log::debug!("snapshot at {} events", self.events);
        Ok(())
    }
}
