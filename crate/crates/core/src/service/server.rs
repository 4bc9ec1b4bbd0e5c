//! TCP front end for the wire protocol, plus a blocking client.
//!
//! All connections share one [`Service`] behind a mutex, so every request is
//! applied atomically and responses are linearizable with respect to
//! location updates.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::Instant;

use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader as AsyncBufReader};
use tokio::net::{TcpListener, TcpStream as AsyncTcpStream};
use tokio::sync::{watch, Mutex};

use super::wire::{Connection, Request, Response};
use super::{Ack, NearbyEntry, ProximityApi, Service, ServiceError};
use crate::geo::GeoPoint;
use crate::world::UserId;

/// How sim time relates to wall time while serving.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Clock {
    /// Sim time stays where the scenario left it.
    #[default]
    Frozen,
    /// Sim time advances by `scale` seconds per wall-clock second.
    Realtime { scale: f64 },
}

pub type Shared = Arc<Mutex<Service>>;

/// Accept connections until `shutdown` flips to true. Requests already being
/// processed finish and get their response before the connection closes.
pub async fn serve(listener: TcpListener, service: Shared, clock: Clock, mut shutdown: watch::Receiver<bool>) -> std::io::Result<()> {
    let started = Instant::now();
    let base_t = service.lock().await.now_s();
    let mut tasks = tokio::task::JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, _) = accepted?;
                // One small reply per request; without this Nagle holds it back for the peer's delayed ACK.
                stream.set_nodelay(true)?;
                tasks.spawn(handle(stream, service.clone(), clock, started, base_t, shutdown.clone()));
            }
            _ = shutdown.changed() => break,
        }
    }
    while tasks.join_next().await.is_some() {}
    Ok(())
}

async fn handle(stream: AsyncTcpStream, service: Shared, clock: Clock, started: Instant, base_t: f64, mut shutdown: watch::Receiver<bool>) {
    let (read, mut write) = stream.into_split();
    let mut lines = AsyncBufReader::new(read).lines();
    let mut conn = Connection::new();
    loop {
        let line = tokio::select! {
            l = lines.next_line() => l,
            _ = shutdown.changed() => return,
        };
        let Ok(Some(line)) = line else { return };
        let reply = {
            let mut svc = service.lock().await;
            if let Clock::Realtime { scale } = clock {
                svc.advance_to(base_t + started.elapsed().as_secs_f64() * scale);
            }
            conn.handle_line(&mut svc, &line)
        };
        if write.write_all(format!("{reply}\n").as_bytes()).await.is_err() {
            return;
        }
    }
}

/// A server running on its own runtime thread, for tests and embedding.
pub struct ServerHandle {
    addr: SocketAddr,
    service: Shared,
    stop: watch::Sender<bool>,
    thread: Option<std::thread::JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> Shared {
        self.service.clone()
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> std::io::Result<()> {
        let _ = self.stop.send(true);
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}

/// Start serving on `addr` (use port 0 for an ephemeral port) in a background thread.
pub fn spawn_background(service: Service, addr: &str, clock: Clock) -> std::io::Result<ServerHandle> {
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    let listener = rt.block_on(TcpListener::bind(addr))?;
    let local = listener.local_addr()?;
    let shared: Shared = Arc::new(Mutex::new(service));
    let (stop, rx) = watch::channel(false);
    let svc = shared.clone();
    let thread = std::thread::spawn(move || rt.block_on(serve(listener, svc, clock, rx)));
    Ok(ServerHandle {
        addr: local,
        service: shared,
        stop,
        thread: Some(thread),
    })
}

/// Serve in the foreground until Ctrl-C.
pub fn run_until_ctrl_c(service: Service, addr: &str, clock: Clock, on_bound: impl FnOnce(SocketAddr)) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = TcpListener::bind(addr).await?;
        on_bound(listener.local_addr()?);
        let (stop, rx) = watch::channel(false);
        tokio::spawn(async move {
            if tokio::signal::ctrl_c().await.is_ok() {
                let _ = stop.send(true);
            }
        });
        serve(listener, Arc::new(Mutex::new(service)), clock, rx).await
    })
}

/// Blocking client speaking the wire protocol.
pub struct RemoteClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    user_id: UserId,
}

impl RemoteClient {
    pub fn connect(addr: SocketAddr, token: &str) -> Result<Self, ServiceError> {
        let stream = TcpStream::connect(addr).map_err(transport)?;
        stream.set_nodelay(true).map_err(transport)?;
        let writer = stream.try_clone().map_err(transport)?;
        let mut c = Self {
            reader: BufReader::new(stream),
            writer,
            user_id: UserId(0),
        };
        let r = c.call(&Request::Login { token: token.to_string() })?;
        c.user_id = r.user_id.ok_or_else(|| ServiceError::Transport("login reply without user_id".into()))?;
        Ok(c)
    }

    pub fn user_id(&self) -> UserId {
        self.user_id
    }

    pub fn call(&mut self, req: &Request) -> Result<Response, ServiceError> {
        let line = serde_json::to_string(req).map_err(|e| ServiceError::Transport(e.to_string()))?;
        self.call_raw(&line)?.into_result()
    }

    /// Send one raw line and read one response.
    pub fn call_raw(&mut self, line: &str) -> Result<Response, ServiceError> {
        self.writer.write_all(line.as_bytes()).map_err(transport)?;
        self.writer.write_all(b"\n").map_err(transport)?;
        let mut buf = String::new();
        if self.reader.read_line(&mut buf).map_err(transport)? == 0 {
            return Err(ServiceError::Transport("connection closed".into()));
        }
        serde_json::from_str(&buf).map_err(|e| ServiceError::Transport(e.to_string()))
    }
}

fn transport(e: std::io::Error) -> ServiceError {
    ServiceError::Transport(e.to_string())
}

fn missing(field: &str) -> ServiceError {
    ServiceError::Transport(format!("reply without {field}"))
}

impl ProximityApi for RemoteClient {
    fn update_location(&mut self, p: GeoPoint) -> Result<Ack, ServiceError> {
        let r = self.call(&Request::UpdateLocation {
            lat: p.lat_deg(),
            lon: p.lon_deg(),
        })?;
        Ok(Ack {
            t_s: r.t_s.ok_or_else(|| missing("t_s"))?,
        })
    }

    fn nearby(&mut self, radius_m: f64) -> Result<Vec<NearbyEntry>, ServiceError> {
        self.call(&Request::Nearby { radius_m })?.users.ok_or_else(|| missing("users"))
    }

    fn profile(&mut self, user: UserId) -> Result<NearbyEntry, ServiceError> {
        self.call(&Request::Profile { user_id: user })?.user.ok_or_else(|| missing("user"))
    }

    /// The server owns the clock; a remote client cannot move it.
    fn wait_until(&mut self, _t_s: f64) -> Result<f64, ServiceError> {
        Err(ServiceError::BadRequest("sim clock is controlled by the server".into()))
    }
}
