//! TCP front end for [`Broker`].
//!
//! One router task owns the broker. Each accepted socket gets a connection
//! task that decodes frames and forwards packets to the router, and writes
//! whatever bytes the router sends back. Dropping a connection's outbound
//! channel closes the socket.

use std::collections::HashMap;
use std::future::Future;
use std::io;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use bytes::{Bytes, BytesMut};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};

use crate::broker::{Broker, BrokerStats, ConnId, Effects, MAX_FRAME};
use crate::codec::{encode_packet, FrameDecoder, FrameError, Packet};

pub fn wall_clock_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

enum Command {
    Accept {
        outbound: mpsc::UnboundedSender<Bytes>,
        reply: oneshot::Sender<ConnId>,
    },
    Packet(ConnId, Packet),
    Lost(ConnId),
    Violation(ConnId, &'static str),
    Stats(oneshot::Sender<BrokerStats>),
    Stop,
}

/// Cheap handle for talking to the router task.
#[derive(Clone)]
pub struct BrokerHandle {
    tx: mpsc::UnboundedSender<Command>,
}

impl BrokerHandle {
    pub async fn stats(&self) -> Option<BrokerStats> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(Command::Stats(reply)).ok()?;
        rx.await.ok()
    }
}

struct Router {
    broker: Broker,
    outbound: HashMap<ConnId, mpsc::UnboundedSender<Bytes>>,
    echo_console: bool,
}

impl Router {
    fn apply(&mut self, fx: Effects) {
        for (conn, packet) in fx.sends {
            let Some(tx) = self.outbound.get(&conn) else {
                continue;
            };
            match encode_packet(&packet) {
                Ok(bytes) => {
                    let _ = tx.send(bytes);
                }
                Err(e) => log::error!("cannot encode {:?} for conn {conn}: {e}", packet.packet_type()),
            }
        }
        for conn in fx.closes {
            self.outbound.remove(&conn);
        }
        for line in fx.console {
            if self.echo_console {
                println!("{line}");
            }
            log::info!("{line}");
        }
    }
}

/// Runs the router until told to stop, then flushes the store.
fn spawn_router(broker: Broker, echo_console: bool, tick: Duration) -> (BrokerHandle, tokio::task::JoinHandle<Broker>) {
    let (tx, mut rx) = mpsc::unbounded_channel();
    let task = tokio::spawn(async move {
        let mut router = Router {
            broker,
            outbound: HashMap::new(),
            echo_console,
        };
        let mut ticker = tokio::time::interval(tick);
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        loop {
            tokio::select! {
                cmd = rx.recv() => {
                    let Some(cmd) = cmd else { break };
                    let now = wall_clock_ms();
                    match cmd {
                        Command::Accept { outbound, reply } => {
                            let conn = router.broker.accept(now);
                            router.outbound.insert(conn, outbound);
                            let _ = reply.send(conn);
                        }
                        Command::Packet(conn, packet) => {
                            let fx = router.broker.handle_packet(conn, packet, now);
                            router.apply(fx);
                        }
                        Command::Lost(conn) => {
                            router.outbound.remove(&conn);
                            let fx = router.broker.handle_connection_loss(conn, now);
                            router.apply(fx);
                        }
                        Command::Violation(conn, why) => {
                            let fx = router.broker.handle_protocol_violation(conn, why, now);
                            router.apply(fx);
                        }
                        Command::Stats(reply) => {
                            let _ = reply.send(router.broker.stats());
                        }
                        Command::Stop => break,
                    }
                }
                _ = ticker.tick() => {
                    let fx = router.broker.tick(wall_clock_ms());
                    router.apply(fx);
                }
            }
        }
        if let Err(e) = router.broker.store().flush() {
            log::error!("flushing message log: {e}");
        }
        router.broker
    });
    (BrokerHandle { tx }, task)
}

async fn serve_connection(mut stream: TcpStream, handle: BrokerHandle) {
    let (out_tx, mut out_rx) = mpsc::unbounded_channel();
    let (reply, conn_rx) = oneshot::channel();
    if handle.tx.send(Command::Accept { outbound: out_tx, reply }).is_err() {
        return;
    }
    let Ok(conn) = conn_rx.await else {
        return;
    };
    let _ = stream.set_nodelay(true);
    let mut decoder = FrameDecoder::new(MAX_FRAME);
    let mut buf = BytesMut::with_capacity(4096);
    loop {
        tokio::select! {
            out = out_rx.recv() => match out {
                Some(bytes) => {
                    if stream.write_all(&bytes).await.is_err() {
                        let _ = handle.tx.send(Command::Lost(conn));
                        break;
                    }
                }
                // the broker closed this connection
                None => break,
            },
            read = stream.read_buf(&mut buf) => {
                match read {
                    Ok(0) | Err(_) => {
                        let _ = handle.tx.send(Command::Lost(conn));
                        break;
                    }
                    Ok(_) => {
                        decoder.extend(&buf);
                        buf.clear();
                        loop {
                            match decoder.next_packet() {
                                Ok(Some(p)) => {
                                    let _ = handle.tx.send(Command::Packet(conn, p));
                                }
                                Ok(None) => break,
                                Err(e) => {
                                    let why = match e {
                                        FrameError::TooLarge(_) => "frame too large",
                                        FrameError::Decode(_) => "malformed frame",
                                    };
                                    let _ = handle.tx.send(Command::Violation(conn, why));
                                    break;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    // drain what the broker queued before closing (e.g. a refusing CONNACK)
    while let Ok(bytes) = out_rx.try_recv() {
        if stream.write_all(&bytes).await.is_err() {
            break;
        }
    }
    let _ = stream.shutdown().await;
}

pub struct MqttServer {
    listener: TcpListener,
    broker: Broker,
    echo_console: bool,
    tick: Duration,
}

impl MqttServer {
    pub async fn bind(addr: &str, broker: Broker) -> io::Result<Self> {
        Ok(MqttServer {
            listener: TcpListener::bind(addr).await?,
            broker,
            echo_console: false,
            tick: Duration::from_millis(500),
        })
    }

    /// Print broker console lines to stdout.
    pub fn echo_console(mut self, on: bool) -> Self {
        self.echo_console = on;
        self
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until `shutdown` resolves, then stops the
    /// router and returns the broker with its store flushed.
    pub async fn run(self, shutdown: impl Future<Output = ()>) -> Broker {
        let (_handle, task) = self.spawn();
        shutdown.await;
        task.shutdown().await
    }

    /// Runs the server in the background.
    pub fn spawn(self) -> (BrokerHandle, ServerTask) {
        let (handle, router) = spawn_router(self.broker, self.echo_console, self.tick);
        let listener = self.listener;
        let accept_handle = handle.clone();
        let (stop_tx, mut stop_rx) = oneshot::channel::<()>();
        let task = tokio::spawn(async move {
            let mut conns = tokio::task::JoinSet::new();
            loop {
                tokio::select! {
                    _ = &mut stop_rx => break,
                    accepted = listener.accept() => match accepted {
                        Ok((stream, peer)) => {
                            log::debug!("accepted {peer}");
                            conns.spawn(serve_connection(stream, accept_handle.clone()));
                        }
                        Err(e) => log::warn!("accept failed: {e}"),
                    },
                }
            }
            conns.abort_all();
            while conns.join_next().await.is_some() {}
            let _ = accept_handle.tx.send(Command::Stop);
            router.await.expect("router task panicked")
        });
        (handle, ServerTask { stop: Some(stop_tx), task })
    }
}

pub struct ServerTask {
    stop: Option<oneshot::Sender<()>>,
    task: tokio::task::JoinHandle<Broker>,
}

impl ServerTask {
    /// Stops accepting, closes every connection, flushes the store and
    /// returns the broker.
    pub async fn shutdown(mut self) -> Broker {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.task.await.expect("server task panicked")
    }
}
