//! Framed request/response connections over TCP.
//!
//! Either side may issue requests. A reader thread per connection routes
//! responses to the waiting caller by correlation id and hands requests to
//! the connection's handler, whose return value is sent back as the response.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, SyncSender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use super::{decode, encode_into, Body, DecodeError, Message};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for response")]
    Timeout,
    #[error("unexpected response type {got} (wanted {wanted})")]
    UnexpectedResponse { got: u8, wanted: u8 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Handler = Arc<dyn Fn(&Arc<Connection>, Body) -> Option<Body> + Send + Sync>;
type CloseHook = Box<dyn FnOnce() + Send>;

pub struct Connection {
    writer: Mutex<TcpStream>,
    pending: Mutex<HashMap<u64, SyncSender<Body>>>,
    next_correlation: AtomicU64,
    closed: AtomicBool,
    peer: SocketAddr,
    on_close: Mutex<Vec<CloseHook>>,
}

impl std::fmt::Debug for Connection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connection").field("peer", &self.peer).field("closed", &self.is_closed()).finish()
    }
}

impl Connection {
    pub fn connect(addr: impl ToSocketAddrs, handler: Handler) -> io::Result<Arc<Connection>> {
        Connection::spawn(TcpStream::connect(addr)?, handler)
    }

    /// Take ownership of an established stream and start its reader thread.
    pub fn spawn(stream: TcpStream, handler: Handler) -> io::Result<Arc<Connection>> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        let reader = stream.try_clone()?;
        let conn = Arc::new(Connection {
            writer: Mutex::new(stream),
            pending: Mutex::new(HashMap::new()),
            next_correlation: AtomicU64::new(1),
            closed: AtomicBool::new(false),
            peer,
            on_close: Mutex::new(Vec::new()),
        });
        let c = Arc::clone(&conn);
        std::thread::Builder::new().name(format!("conn-{peer}")).spawn(move || c.read_loop(reader, handler))?;
        Ok(conn)
    }

    pub fn peer(&self) -> SocketAddr {
        self.peer
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }

    /// Run `hook` once when the connection closes (immediately if already closed).
    pub fn on_close(&self, hook: impl FnOnce() + Send + 'static) {
        let mut hooks = self.on_close.lock();
        if self.is_closed() {
            drop(hooks);
            hook();
        } else {
            hooks.push(Box::new(hook));
        }
    }

    pub fn close(&self) {
        let _ = self.writer.lock().shutdown(Shutdown::Both);
    }

    fn send(&self, msg: &Message) -> Result<(), TransportError> {
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let mut buf = Vec::with_capacity(64);
        encode_into(msg, &mut buf);
        let mut w = self.writer.lock();
        w.write_all(&buf).map_err(|e| {
            let _ = w.shutdown(Shutdown::Both);
            TransportError::Io(e)
        })
    }

    /// Send a request and wait for its response.
    pub fn call(&self, body: Body, timeout: Duration) -> Result<Body, TransportError> {
        let wanted = body.response_type().expect("call() takes a request body");
        let correlation = self.next_correlation.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::sync_channel(1);
        self.pending.lock().insert(correlation, tx);
        if let Err(e) = self.send(&Message::new(correlation, body)) {
            self.pending.lock().remove(&correlation);
            return Err(e);
        }
        match rx.recv_timeout(timeout) {
            Ok(resp) if resp.msg_type() == wanted => Ok(resp),
            Ok(resp) => Err(TransportError::UnexpectedResponse { got: resp.msg_type(), wanted }),
            Err(RecvTimeoutError::Timeout) => {
                self.pending.lock().remove(&correlation);
                Err(TransportError::Timeout)
            }
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn read_loop(self: Arc<Self>, mut stream: TcpStream, handler: Handler) {
        let mut buf: Vec<u8> = Vec::with_capacity(4096);
        let mut chunk = [0u8; 4096];
        'outer: loop {
            match stream.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => buf.extend_from_slice(&chunk[..n]),
            }
            let mut consumed = 0;
            loop {
                match decode(&buf[consumed..]) {
                    Ok((msg, used)) => {
                        consumed += used;
                        self.dispatch(msg, &handler);
                    }
                    Err(DecodeError::Incomplete { .. }) => break,
                    Err(e) => {
                        log::warn!("closing connection to {}: {e}", self.peer);
                        break 'outer;
                    }
                }
            }
            buf.drain(..consumed);
        }
        self.closed.store(true, Ordering::SeqCst);
        let _ = stream.shutdown(Shutdown::Both);
        // Dropping the senders wakes every pending caller with `Closed`.
        self.pending.lock().clear();
        let hooks = std::mem::take(&mut *self.on_close.lock());
        for hook in hooks {
            hook();
        }
    }

    fn dispatch(self: &Arc<Self>, msg: Message, handler: &Handler) {
        if msg.body.is_request() {
            if let Some(resp) = handler(self, msg.body) {
                let _ = self.send(&Message::new(msg.correlation, resp));
            }
        } else if let Some(tx) = self.pending.lock().remove(&msg.correlation) {
            let _ = tx.try_send(msg.body);
        }
    }
}

/// Accepts connections and attaches a handler to each.
pub struct Server {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<Arc<Connection>>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    /// Bind `addr` and serve. `on_connect` runs for each accepted connection.
    pub fn bind(
        addr: impl ToSocketAddrs,
        handler: Handler,
        on_connect: impl Fn(&Arc<Connection>) + Send + 'static,
    ) -> io::Result<Server> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let connections: Arc<Mutex<Vec<Arc<Connection>>>> = Arc::new(Mutex::new(Vec::new()));
        let (s, conns) = (Arc::clone(&stop), Arc::clone(&connections));
        let acceptor = std::thread::Builder::new().name(format!("accept-{addr}")).spawn(move || {
            for stream in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                match Connection::spawn(stream, Arc::clone(&handler)) {
                    Ok(conn) => {
                        let mut list = conns.lock();
                        list.retain(|c| !c.is_closed());
                        list.push(Arc::clone(&conn));
                        drop(list);
                        on_connect(&conn);
                    }
                    Err(e) => log::warn!("accept on {addr} failed: {e}"),
                }
            }
        })?;
        Ok(Server { addr, stop, connections, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting and close every live connection.
    pub fn shutdown(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for c in self.connections.lock().drain(..) {
            c.close();
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Status;

    fn echo_handler() -> Handler {
        Arc::new(|_, body| match body {
            Body::CollectReq => Some(Body::CollectResp(Vec::new())),
            Body::DeregisterStage { stage_id } if stage_id == 0 => None,
            Body::DeregisterStage { .. } => Some(Body::DeregisterAck(Status::Ok)),
            _ => Some(Body::RuleAck(Status::Failed)),
        })
    }

    #[test]
    fn request_response_over_loopback() {
        let server = Server::bind("127.0.0.1:0", echo_handler(), |_| {}).unwrap();
        let client = Connection::connect(server.local_addr(), echo_handler()).unwrap();
        for _ in 0..100 {
            assert_eq!(client.call(Body::CollectReq, Duration::from_secs(5)).unwrap(), Body::CollectResp(Vec::new()));
        }
        assert!(matches!(
            client.call(Body::SetPolicy(vec![1]), Duration::from_secs(5)),
            Err(TransportError::UnexpectedResponse { got: 6, wanted: 8 })
        ));
        assert!(matches!(
            client.call(Body::DeregisterStage { stage_id: 0 }, Duration::from_millis(50)),
            Err(TransportError::Timeout)
        ));
    }

    #[test]
    fn server_can_call_client() {
        let (tx, rx) = mpsc::channel();
        let tx = Mutex::new(tx);
        let server = Server::bind("127.0.0.1:0", echo_handler(), move |c| tx.lock().send(Arc::clone(c)).unwrap()).unwrap();
        let _client = Connection::connect(server.local_addr(), echo_handler()).unwrap();
        let server_side = rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert_eq!(
            server_side.call(Body::DeregisterStage { stage_id: 9 }, Duration::from_secs(5)).unwrap(),
            Body::DeregisterAck(Status::Ok)
        );
    }

    #[test]
    fn close_wakes_callers_and_hooks() {
        let slow: Handler = Arc::new(|_, _| {
            std::thread::sleep(Duration::from_millis(100));
            None
        });
        let mut server = Server::bind("127.0.0.1:0", slow, |_| {}).unwrap();
        let client = Connection::connect(server.local_addr(), echo_handler()).unwrap();
        let (tx, rx) = mpsc::channel();
        client.on_close(move || tx.send(()).unwrap());
        let c2 = Arc::clone(&client);
        let caller = std::thread::spawn(move || c2.call(Body::CollectReq, Duration::from_secs(10)));
        std::thread::sleep(Duration::from_millis(20));
        server.shutdown();
        assert!(matches!(caller.join().unwrap(), Err(TransportError::Closed)));
        rx.recv_timeout(Duration::from_secs(5)).unwrap();
        assert!(client.is_closed());
        assert!(matches!(client.call(Body::CollectReq, Duration::from_secs(1)), Err(TransportError::Closed)));
    }

    #[test]
    fn corrupt_frame_tears_down() {
        let server = Server::bind("127.0.0.1:0", echo_handler(), |_| {}).unwrap();
        let mut raw = TcpStream::connect(server.local_addr()).unwrap();
        raw.write_all(&[9, 0, 0, 0, 0xFF, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        raw.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        let mut b = [0u8; 1];
        assert!(matches!(raw.read(&mut b), Ok(0) | Err(_)));
    }
}
