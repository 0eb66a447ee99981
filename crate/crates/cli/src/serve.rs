//! Websocket front end for [`Session`]. One thread accepts, one polls the
//! session and fans frames out, and each connection has its own thread.

use std::collections::{BTreeMap, VecDeque};
use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tungstenite::{Message, WebSocket};
use wbmpc::gateway::protocol::encode;
use wbmpc::gateway::{ClientId, Session, SessionConfig};
use wbmpc::runtime::RuntimeError;

pub const DEFAULT_BIND: &str = "127.0.0.1:8765";

#[derive(Clone, Debug)]
pub struct ServeOptions {
    pub bind: String,
    pub session: SessionConfig,
    /// Frames queued per client before the oldest are dropped.
    pub outbox_capacity: usize,
}

struct Outbox {
    frames: Mutex<VecDeque<String>>,
    capacity: usize,
    dropped: AtomicU64,
}

impl Outbox {
    fn push(&self, text: String) {
        let mut q = lock(&self.frames);
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(text);
    }

    fn drain(&self) -> Vec<String> {
        lock(&self.frames).drain(..).collect()
    }
}

struct Hub {
    session: Mutex<Session>,
    clients: Mutex<BTreeMap<ClientId, Arc<Outbox>>>,
    stop: AtomicBool,
    capacity: usize,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct Server {
    addr: SocketAddr,
    hub: Arc<Hub>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    pub fn start(opts: ServeOptions) -> Result<Self, RuntimeError> {
        let listener = TcpListener::bind(&opts.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let hub = Arc::new(Hub {
            session: Mutex::new(Session::start(opts.session)?),
            clients: Mutex::new(BTreeMap::new()),
            stop: AtomicBool::new(false),
            capacity: opts.outbox_capacity.max(1),
        });
        let accept_hub = hub.clone();
        let fan_hub = hub.clone();
        let threads = vec![
            thread::Builder::new()
                .name("wbmpc-accept".into())
                .spawn(move || accept_loop(listener, accept_hub))?,
            thread::Builder::new()
                .name("wbmpc-fanout".into())
                .spawn(move || fanout_loop(fan_hub))?,
        ];
        log::info!("session server listening on ws://{addr}");
        Ok(Self { addr, hub, threads })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Frames dropped across all clients because they read too slowly.
    pub fn dropped_frames(&self) -> u64 {
        lock(&self.hub.clients)
            .values()
            .map(|o| o.dropped.load(Ordering::Relaxed))
            .sum()
    }

    /// Blocks until the process is killed.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.hub.stop.store(true, Ordering::Release);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.hub.stop.store(true, Ordering::Release);
    }
}

fn accept_loop(listener: TcpListener, hub: Arc<Hub>) {
    let mut conns: Vec<JoinHandle<()>> = Vec::new();
    while !hub.stop.load(Ordering::Acquire) {
        match listener.accept() {
            Ok((stream, peer)) => {
                let hub = hub.clone();
                let spawned = thread::Builder::new()
                    .name(format!("wbmpc-conn-{peer}"))
                    .spawn(move || {
                        if let Err(e) = connection(stream, &hub) {
                            log::debug!("connection {peer} closed: {e}");
                        }
                    });
                match spawned {
                    Ok(h) => conns.push(h),
                    Err(e) => log::warn!("could not spawn connection thread: {e}"),
                }
                conns.retain(|h| !h.is_finished());
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10))
            }
            Err(e) => log::warn!("accept failed: {e}"),
        }
    }
    for h in conns {
        let _ = h.join();
    }
}

fn fanout_loop(hub: Arc<Hub>) {
    while !hub.stop.load(Ordering::Acquire) {
        let (updates, joined) = {
            let mut session = lock(&hub.session);
            let updates = session.poll();
            let clients = lock(&hub.clients);
            let joined: Vec<Arc<Outbox>> = clients
                .iter()
                .filter(|(id, _)| session.role(**id).is_some())
                .map(|(_, o)| o.clone())
                .collect();
            (updates, joined)
        };
        for u in &updates {
            let text = encode(u);
            for o in &joined {
                o.push(text.clone());
            }
        }
        thread::sleep(Duration::from_millis(5));
    }
}

fn connection(stream: TcpStream, hub: &Hub) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => tungstenite::Error::ConnectionClosed,
    })?;
    ws.get_ref()
        .set_read_timeout(Some(Duration::from_millis(5)))?;
    let id = lock(&hub.session).connect();
    let outbox = Arc::new(Outbox {
        frames: Mutex::new(VecDeque::new()),
        capacity: hub.capacity,
        dropped: AtomicU64::new(0),
    });
    lock(&hub.clients).insert(id, outbox.clone());
    let result = serve_client(&mut ws, hub, id, &outbox);
    lock(&hub.clients).remove(&id);
    lock(&hub.session).disconnect(id);
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn serve_client(
    ws: &mut WebSocket<TcpStream>,
    hub: &Hub,
    id: ClientId,
    outbox: &Outbox,
) -> Result<(), tungstenite::Error> {
    while !hub.stop.load(Ordering::Acquire) {
        match ws.read() {
            Ok(Message::Text(text)) => {
                let replies = lock(&hub.session).handle(id, text.as_str());
                for r in replies {
                    ws.send(Message::text(encode(&r)))?;
                }
            }
            Ok(Message::Binary(_)) => {
                let nack = wbmpc::gateway::SessionUpdate::Nack {
                    id: None,
                    reason: "parse error: binary messages are not supported".into(),
                };
                ws.send(Message::text(encode(&nack)))?;
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) => {}
            Err(e) => return Err(e),
        }
        for text in outbox.drain() {
            ws.write(Message::text(text))?;
        }
        ws.flush()?;
    }
    Ok(())
}
