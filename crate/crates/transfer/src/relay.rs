//! Key-value relay between weight publishers and subscribers.
//!
//! Writes are last-writer-wins per key. Pulls block until every requested
//! key is present or the timeout lapses. Each session owns one link, and
//! its optional token bucket throttles payload bytes in both directions.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::throttle::{TokenBucket, CHUNK_BYTES};
use crate::wire::{read_frame, read_frame_crc, read_str, read_u32, write_frame, write_frame_with_crc, write_str, write_u32};
use crate::{Result, TransferError};

pub trait Relay: Sync {
    type Session: RelaySession + Send;

    fn session(&self, throttle: Option<TokenBucket>) -> Result<Self::Session>;
}

pub trait RelaySession {
    fn push(&mut self, key: &str, payload: &[u8]) -> Result<()>;
    /// Payloads in the order of `keys`.
    fn pull(&mut self, keys: &[String], timeout: Duration) -> Result<Vec<Vec<u8>>>;
    /// Keys starting with `prefix` and their payload sizes, in key order.
    fn list(&mut self, prefix: &str) -> Result<Vec<(String, u64)>>;
    /// Payload bytes pushed plus pulled through this session.
    fn bytes_moved(&self) -> u64;
}

/// A stored payload and, when it arrived over the wire, its verified CRC.
struct Entry {
    payload: Vec<u8>,
    crc: Option<u32>,
}

#[derive(Default)]
struct Store {
    map: Mutex<BTreeMap<String, Arc<Entry>>>,
    arrived: Condvar,
}

impl Store {
    fn put(&self, key: String, payload: Vec<u8>, crc: Option<u32>) {
        self.map.lock().expect("relay store").insert(key, Arc::new(Entry { payload, crc }));
        self.arrived.notify_all();
    }

    fn get_all(&self, keys: &[String], timeout: Duration) -> Result<Vec<Arc<Entry>>> {
        let deadline = Instant::now() + timeout;
        let mut map = self.map.lock().expect("relay store");
        loop {
            match keys.iter().find(|k| !map.contains_key(*k)) {
                None => return Ok(keys.iter().map(|k| map[k].clone()).collect()),
                Some(missing) => {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(TransferError::RelayTimeout { key: missing.clone(), waited: timeout });
                    }
                    map = self.arrived.wait_timeout(map, deadline - now).expect("relay store").0;
                }
            }
        }
    }

    fn list(&self, prefix: &str) -> Vec<(String, u64)> {
        let map = self.map.lock().expect("relay store");
        map.range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.payload.len() as u64))
            .collect()
    }
}

fn throttle_bytes(tb: &mut Option<TokenBucket>, n: usize) {
    if let Some(tb) = tb {
        let mut left = n;
        while left > 0 {
            let c = left.min(CHUNK_BYTES);
            tb.take(c);
            left -= c;
        }
    }
}

/// In-process relay.
#[derive(Clone, Default)]
pub struct MemoryRelay {
    store: Arc<Store>,
}

impl MemoryRelay {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn remove(&self, key: &str) -> bool {
        self.store.map.lock().expect("relay store").remove(key).is_some()
    }

    pub fn len(&self) -> usize {
        self.store.map.lock().expect("relay store").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct MemorySession {
    store: Arc<Store>,
    throttle: Option<TokenBucket>,
    moved: u64,
}

impl Relay for MemoryRelay {
    type Session = MemorySession;

    fn session(&self, throttle: Option<TokenBucket>) -> Result<MemorySession> {
        Ok(MemorySession { store: self.store.clone(), throttle, moved: 0 })
    }
}

impl RelaySession for MemorySession {
    fn push(&mut self, key: &str, payload: &[u8]) -> Result<()> {
        throttle_bytes(&mut self.throttle, payload.len());
        self.store.put(key.to_string(), payload.to_vec(), None);
        self.moved += payload.len() as u64;
        Ok(())
    }

    fn pull(&mut self, keys: &[String], timeout: Duration) -> Result<Vec<Vec<u8>>> {
        let got = self.store.get_all(keys, timeout)?;
        let mut out = Vec::with_capacity(got.len());
        for e in got {
            throttle_bytes(&mut self.throttle, e.payload.len());
            self.moved += e.payload.len() as u64;
            out.push(e.payload.clone());
        }
        Ok(out)
    }

    fn list(&mut self, prefix: &str) -> Result<Vec<(String, u64)>> {
        Ok(self.store.list(prefix))
    }

    fn bytes_moved(&self) -> u64 {
        self.moved
    }
}

const OP_PUSH: u8 = b'P';
const OP_GET: u8 = b'G';
const OP_LIST: u8 = b'L';
const ST_OK: u8 = 0;
const ST_TIMEOUT: u8 = 1;
const ST_INTEGRITY: u8 = 2;

/// TCP front end for a relay store. Serves each connection on its own
/// thread until dropped.
pub struct RelayServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl RelayServer {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let store = Arc::new(Store::default());
        let flag = stop.clone();
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(conn) = conn else { continue };
                let store = store.clone();
                std::thread::spawn(move || {
                    // a broken connection only ends its own handler
                    let _ = serve(conn, &store);
                });
            }
        });
        Ok(RelayServer { addr, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(conn: TcpStream, store: &Store) -> Result<()> {
    conn.set_nodelay(true)?;
    let mut r = BufReader::new(conn.try_clone()?);
    let mut w = BufWriter::new(conn);
    loop {
        let mut op = [0u8; 1];
        if r.read(&mut op)? == 0 {
            return Ok(());
        }
        match op[0] {
            OP_PUSH => match read_frame_crc(&mut r, None) {
                Ok((key, payload, crc)) => {
                    store.put(key, payload, Some(crc));
                    w.write_all(&[ST_OK])?;
                }
                Err(TransferError::Integrity { key }) => {
                    w.write_all(&[ST_INTEGRITY])?;
                    write_str(&mut w, &key)?;
                }
                Err(e) => return Err(e),
            },
            OP_GET => {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                let timeout = Duration::from_millis(u64::from_le_bytes(b));
                let n = read_u32(&mut r)? as usize;
                let keys = (0..n).map(|_| read_str(&mut r)).collect::<Result<Vec<_>>>()?;
                match store.get_all(&keys, timeout) {
                    Ok(payloads) => {
                        w.write_all(&[ST_OK])?;
                        for (k, e) in keys.iter().zip(payloads) {
                            let crc = e.crc.unwrap_or_else(|| crc32fast::hash(&e.payload));
                            write_frame_with_crc(&mut w, k, &e.payload, crc, None)?;
                        }
                    }
                    Err(TransferError::RelayTimeout { key, .. }) => {
                        w.write_all(&[ST_TIMEOUT])?;
                        write_str(&mut w, &key)?;
                    }
                    Err(e) => return Err(e),
                }
            }
            OP_LIST => {
                let prefix = read_str(&mut r)?;
                let entries = store.list(&prefix);
                w.write_all(&[ST_OK])?;
                write_u32(&mut w, entries.len())?;
                for (k, size) in entries {
                    write_str(&mut w, &k)?;
                    w.write_all(&size.to_le_bytes())?;
                }
            }
            other => return Err(TransferError::Wire(format!("unknown op {other:#04x}"))),
        }
        w.flush()?;
    }
}

/// Client for a [`RelayServer`]; each session is one TCP connection.
#[derive(Debug, Clone)]
pub struct TcpRelay {
    addr: SocketAddr,
}

impl TcpRelay {
    pub fn new(addr: SocketAddr) -> Self {
        TcpRelay { addr }
    }
}

pub struct TcpSession {
    r: BufReader<TcpStream>,
    w: BufWriter<TcpStream>,
    throttle: Option<TokenBucket>,
    moved: u64,
}

impl Relay for TcpRelay {
    type Session = TcpSession;

    fn session(&self, throttle: Option<TokenBucket>) -> Result<TcpSession> {
        let s = TcpStream::connect(self.addr)?;
        s.set_nodelay(true)?;
        Ok(TcpSession { r: BufReader::new(s.try_clone()?), w: BufWriter::new(s), throttle, moved: 0 })
    }
}

impl TcpSession {
    fn status(&mut self) -> Result<u8> {
        let mut b = [0u8; 1];
        self.r.read_exact(&mut b)?;
        Ok(b[0])
    }
}

impl RelaySession for TcpSession {
    fn push(&mut self, key: &str, payload: &[u8]) -> Result<()> {
        self.w.write_all(&[OP_PUSH])?;
        write_frame(&mut self.w, key, payload, self.throttle.as_mut())?;
        self.w.flush()?;
        match self.status()? {
            ST_OK => {
                self.moved += payload.len() as u64;
                Ok(())
            }
            ST_INTEGRITY => Err(TransferError::Integrity { key: read_str(&mut self.r)? }),
            s => Err(TransferError::Wire(format!("unexpected status {s}"))),
        }
    }

    fn pull(&mut self, keys: &[String], timeout: Duration) -> Result<Vec<Vec<u8>>> {
        self.w.write_all(&[OP_GET])?;
        self.w.write_all(&(timeout.as_millis() as u64).to_le_bytes())?;
        write_u32(&mut self.w, keys.len())?;
        for k in keys {
            write_str(&mut self.w, k)?;
        }
        self.w.flush()?;
        match self.status()? {
            ST_OK => {
                let mut out = Vec::with_capacity(keys.len());
                for k in keys {
                    let (got, payload) = read_frame(&mut self.r, self.throttle.as_mut())?;
                    if &got != k {
                        return Err(TransferError::Wire(format!("asked for {k}, got {got}")));
                    }
                    self.moved += payload.len() as u64;
                    out.push(payload);
                }
                Ok(out)
            }
            ST_TIMEOUT => Err(TransferError::RelayTimeout { key: read_str(&mut self.r)?, waited: timeout }),
            s => Err(TransferError::Wire(format!("unexpected status {s}"))),
        }
    }

    fn list(&mut self, prefix: &str) -> Result<Vec<(String, u64)>> {
        self.w.write_all(&[OP_LIST])?;
        write_str(&mut self.w, prefix)?;
        self.w.flush()?;
        match self.status()? {
            ST_OK => {
                let n = read_u32(&mut self.r)? as usize;
                let mut out = Vec::with_capacity(n);
                for _ in 0..n {
                    let k = read_str(&mut self.r)?;
                    let mut b = [0u8; 8];
                    self.r.read_exact(&mut b)?;
                    out.push((k, u64::from_le_bytes(b)));
                }
                Ok(out)
            }
            s => Err(TransferError::Wire(format!("unexpected status {s}"))),
        }
    }

    fn bytes_moved(&self) -> u64 {
        self.moved
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_relay_semantics() {
        let relay = MemoryRelay::new();
        let mut a = relay.session(None).unwrap();
        let mut b = relay.session(None).unwrap();
        a.push("s1/x", b"one").unwrap();
        a.push("s1/x", b"two").unwrap();
        a.push("s2/y", b"").unwrap();
        assert_eq!(b.pull(&["s1/x".into()], Duration::ZERO).unwrap(), vec![b"two".to_vec()]);
        assert_eq!(b.list("s1/").unwrap(), vec![("s1/x".to_string(), 3)]);
        assert!(matches!(
            b.pull(&["s1/x".into(), "s3/z".into()], Duration::from_millis(20)),
            Err(TransferError::RelayTimeout { key, .. }) if key == "s3/z"
        ));
        assert_eq!(a.bytes_moved(), 6);
        assert_eq!(b.bytes_moved(), 3);
    }

    #[test]
    fn pull_waits_for_late_push() {
        let relay = MemoryRelay::new();
        let r2 = relay.clone();
        let h = std::thread::spawn(move || {
            std::thread::sleep(Duration::from_millis(30));
            r2.session(None).unwrap().push("k", b"late").unwrap();
        });
        let got = relay.session(None).unwrap().pull(&["k".into()], Duration::from_secs(5)).unwrap();
        assert_eq!(got[0], b"late");
        h.join().unwrap();
    }
}
