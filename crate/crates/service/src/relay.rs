//! TCP relay that counts the bytes passing through it in each direction.
//! Point a client at the relay to measure its network traffic.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

#[derive(Debug, Default)]
struct Counters {
    upstream: AtomicU64,
    downstream: AtomicU64,
    connections: AtomicU64,
}

pub struct CountingRelay {
    addr: SocketAddr,
    counters: Arc<Counters>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

fn pump(mut from: TcpStream, mut to: TcpStream, counter: Arc<Counters>, up: bool) {
    let mut buf = [0u8; 16 * 1024];
    loop {
        let n = match from.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => n,
        };
        let c = if up { &counter.upstream } else { &counter.downstream };
        c.fetch_add(n as u64, Ordering::SeqCst);
        if to.write_all(&buf[..n]).is_err() {
            break;
        }
    }
    let _ = to.shutdown(Shutdown::Write);
}

impl CountingRelay {
    /// Listen on a free local port and forward every connection to `target`.
    pub fn start(target: SocketAddr) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let counters = Arc::new(Counters::default());
        let stop = Arc::new(AtomicBool::new(false));
        let (c, s) = (counters.clone(), stop.clone());
        let accept = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(client) = conn else { continue };
                let Ok(server) = TcpStream::connect(target) else { continue };
                c.connections.fetch_add(1, Ordering::SeqCst);
                let (client2, server2) = match (client.try_clone(), server.try_clone()) {
                    (Ok(a), Ok(b)) => (a, b),
                    _ => continue,
                };
                let (up, down) = (c.clone(), c.clone());
                std::thread::spawn(move || pump(client, server, up, true));
                std::thread::spawn(move || pump(server2, client2, down, false));
            }
        });
        Ok(Self { addr, counters, stop, accept: Some(accept) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Bytes sent from clients towards the target.
    pub fn upstream_bytes(&self) -> u64 {
        self.counters.upstream.load(Ordering::SeqCst)
    }

    /// Bytes sent from the target back to clients.
    pub fn downstream_bytes(&self) -> u64 {
        self.counters.downstream.load(Ordering::SeqCst)
    }

    pub fn total_bytes(&self) -> u64 {
        self.upstream_bytes() + self.downstream_bytes()
    }

    pub fn connections(&self) -> u64 {
        self.counters.connections.load(Ordering::SeqCst)
    }
}

impl Drop for CountingRelay {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}
