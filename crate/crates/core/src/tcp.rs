//! Real-socket runtime: every node is a thread with its own TCP listener.
//!
//! A node's thread owns its [`Node`] and is the only writer on its outbound
//! connections, which are opened lazily and start with a HELLO frame. Each
//! accepted connection gets a reader thread that feeds decoded messages into
//! the node's queue, so a node blocked writing a large frame never stops
//! its peers from making progress. A broken connection in either direction
//! becomes a PeerDown input.

use std::collections::{BTreeMap, BinaryHeap};
use std::cmp::Reverse;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::config::ClusterConfig;
use crate::error::{Error, Result};
use crate::id::NodeId;
use crate::node::{ClientReply, ClientRequest, Effect, Input, Node, Ticket};
use crate::trace::TraceRecord;
use crate::wire::{Frame, Message};

enum Cmd {
    Input(Input),
    Stop,
}

struct NodeHandle {
    queue: Sender<Cmd>,
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    /// Accepted sockets, so a stopped node can sever them.
    accepted: Arc<Mutex<Vec<TcpStream>>>,
    threads: Vec<JoinHandle<()>>,
}

pub struct TcpCluster {
    cfg: Arc<ClusterConfig>,
    nodes: Vec<Option<NodeHandle>>,
    replies_rx: Receiver<(Ticket, ClientReply)>,
    replies_tx: Sender<(Ticket, ClientReply)>,
    replies: BTreeMap<Ticket, ClientReply>,
    trace: Arc<Mutex<Vec<TraceRecord>>>,
    start: Instant,
    next_ticket: Ticket,
}

fn bind_addr(cfg: &ClusterConfig, i: usize) -> String {
    cfg.nodes[i].addr.clone().unwrap_or_else(|| "127.0.0.1:0".to_string())
}

impl TcpCluster {
    /// Binds every node's listener, then starts the node threads.
    pub fn start(cfg: ClusterConfig) -> Result<Self> {
        cfg.validate()?;
        let cfg = Arc::new(cfg);
        let listeners = (0..cfg.num_nodes())
            .map(|i| TcpListener::bind(bind_addr(&cfg, i)).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr()).collect::<std::io::Result<_>>()?;
        let (replies_tx, replies_rx) = mpsc::channel();
        let trace = Arc::new(Mutex::new(Vec::new()));
        let start = Instant::now();
        let mut nodes = Vec::new();
        for (i, listener) in listeners.into_iter().enumerate() {
            let id = NodeId(cfg.nodes[i].id);
            let node = Node::new(id, cfg.clone())?;
            let (queue, rx) = mpsc::channel();
            let stopping = Arc::new(AtomicBool::new(false));
            let accepted = Arc::new(Mutex::new(Vec::new()));
            let acceptor = {
                let (queue, stopping, accepted) = (queue.clone(), stopping.clone(), accepted.clone());
                std::thread::Builder::new()
                    .name(format!("{id}-accept"))
                    .spawn(move || accept_loop(listener, queue, stopping, accepted))?
            };
            let runner = {
                let ctx = Runner {
                    node,
                    rx,
                    own: queue.clone(),
                    addrs: addrs.clone(),
                    peers: BTreeMap::new(),
                    timers: BinaryHeap::new(),
                    replies: replies_tx.clone(),
                    trace: trace.clone(),
                    start,
                };
                std::thread::Builder::new().name(format!("{id}")).spawn(move || ctx.run())?
            };
            nodes.push(Some(NodeHandle { queue, addr: addrs[i], stopping, accepted, threads: vec![acceptor, runner] }));
        }
        Ok(Self { cfg, nodes, replies_rx, replies_tx, replies: BTreeMap::new(), trace, start, next_ticket: 0 })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.cfg
    }

    pub fn addr(&self, node: NodeId) -> Option<SocketAddr> {
        self.nodes.get(node.index()).and_then(|n| n.as_ref()).map(|n| n.addr)
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn submit(&mut self, node: NodeId, request: ClientRequest) -> Ticket {
        let ticket = self.next_ticket;
        self.next_ticket += 1;
        match self.nodes.get(node.index()).and_then(|n| n.as_ref()) {
            Some(h) => {
                let _ = h.queue.send(Cmd::Input(Input::Client { ticket, request }));
            }
            None => {
                let _ = self.replies_tx.send((ticket, ClientReply::Failed(Error::PeerDown(node))));
            }
        }
        ticket
    }

    /// Waits until every ticket has a reply or `timeout` passes.
    pub fn wait(&mut self, tickets: &[Ticket], timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if tickets.iter().all(|t| self.replies.contains_key(t)) {
                return true;
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match self.replies_rx.recv_timeout(left) {
                Ok((t, r)) => {
                    self.replies.insert(t, r);
                }
                Err(_) => return tickets.iter().all(|t| self.replies.contains_key(t)),
            }
        }
    }

    pub fn reply(&self, ticket: Ticket) -> Option<&ClientReply> {
        self.replies.get(&ticket)
    }

    pub fn trace(&self) -> Vec<TraceRecord> {
        self.trace.lock().unwrap().clone()
    }

    /// Stops a node abruptly: its thread exits and all its sockets close.
    pub fn kill(&mut self, node: NodeId) {
        if let Some(h) = self.nodes.get_mut(node.index()).and_then(|n| n.take()) {
            stop(h);
        }
    }

    pub fn shutdown(&mut self) {
        for slot in &mut self.nodes {
            if let Some(h) = slot.take() {
                stop(h);
            }
        }
    }
}

impl Drop for TcpCluster {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn stop(h: NodeHandle) {
    h.stopping.store(true, Ordering::SeqCst);
    let _ = h.queue.send(Cmd::Stop);
    // Wake the acceptor so it notices the flag.
    let _ = TcpStream::connect(h.addr);
    for s in h.accepted.lock().unwrap().drain(..) {
        let _ = s.shutdown(Shutdown::Both);
    }
    for t in h.threads {
        let _ = t.join();
    }
}

fn accept_loop(
    listener: TcpListener,
    queue: Sender<Cmd>,
    stopping: Arc<AtomicBool>,
    accepted: Arc<Mutex<Vec<TcpStream>>>,
) {
    for stream in listener.incoming() {
        if stopping.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        if let Ok(clone) = stream.try_clone() {
            accepted.lock().unwrap().push(clone);
        }
        let queue = queue.clone();
        let _ = std::thread::Builder::new().name("reader".into()).spawn(move || read_loop(stream, queue));
    }
}

fn read_loop(stream: TcpStream, queue: Sender<Cmd>) {
    let mut r = BufReader::with_capacity(1 << 20, stream);
    let from = match Frame::read_from(&mut r).and_then(|f| Message::from_frame(&f)) {
        Ok(Message::Hello { node }) => node,
        _ => return,
    };
    loop {
        match Frame::read_from(&mut r).and_then(|f| Message::from_frame(&f)) {
            Ok(msg) => {
                if queue.send(Cmd::Input(Input::Deliver { from, msg })).is_err() {
                    return;
                }
            }
            Err(_) => {
                let _ = queue.send(Cmd::Input(Input::PeerDown(from)));
                return;
            }
        }
    }
}

struct Runner {
    node: Node,
    rx: Receiver<Cmd>,
    own: Sender<Cmd>,
    addrs: Vec<SocketAddr>,
    peers: BTreeMap<NodeId, BufWriter<TcpStream>>,
    timers: BinaryHeap<Reverse<(Instant, u64)>>,
    replies: Sender<(Ticket, ClientReply)>,
    trace: Arc<Mutex<Vec<TraceRecord>>>,
    start: Instant,
}

impl Runner {
    fn run(mut self) {
        loop {
            let now = Instant::now();
            while let Some(Reverse((at, token))) = self.timers.peek().copied() {
                if at > now {
                    break;
                }
                self.timers.pop();
                self.feed(Input::Timer(token));
            }
            let cmd = match self.timers.peek() {
                Some(Reverse((at, _))) => match self.rx.recv_timeout(at.saturating_duration_since(now)) {
                    Ok(c) => c,
                    Err(RecvTimeoutError::Timeout) => continue,
                    Err(RecvTimeoutError::Disconnected) => return,
                },
                None => match self.rx.recv() {
                    Ok(c) => c,
                    Err(_) => return,
                },
            };
            match cmd {
                Cmd::Input(input) => self.feed(input),
                Cmd::Stop => {
                    for (_, w) in std::mem::take(&mut self.peers) {
                        let _ = w.get_ref().shutdown(Shutdown::Both);
                    }
                    return;
                }
            }
        }
    }

    fn feed(&mut self, input: Input) {
        let me = self.node.id();
        for effect in self.node.handle(input) {
            match effect {
                Effect::Send { to, msg } if to == me => {
                    let _ = self.own.send(Cmd::Input(Input::Deliver { from: me, msg }));
                }
                Effect::Send { to, msg } => {
                    if self.send(to, &msg).is_err() {
                        if let Some(w) = self.peers.remove(&to) {
                            let _ = w.get_ref().shutdown(Shutdown::Both);
                        }
                        let _ = self.own.send(Cmd::Input(Input::PeerDown(to)));
                    }
                }
                Effect::Timer { after, token } => self.timers.push(Reverse((Instant::now() + after, token))),
                Effect::Reply { ticket, reply } => {
                    let _ = self.replies.send((ticket, reply));
                }
                Effect::Trace(event) => {
                    let t = self.start.elapsed().as_nanos() as u64;
                    self.trace.lock().unwrap().push(TraceRecord { t, node: me, event });
                }
            }
        }
    }

    fn send(&mut self, to: NodeId, msg: &Message) -> Result<()> {
        if !self.peers.contains_key(&to) {
            let addr = *self.addrs.get(to.index()).ok_or(Error::PeerDown(to))?;
            let stream = TcpStream::connect_timeout(&addr, Duration::from_secs(2))?;
            stream.set_nodelay(true)?;
            let mut w = BufWriter::with_capacity(1 << 20, stream);
            Message::Hello { node: self.node.id() }.to_frame().write_to(&mut w)?;
            self.peers.insert(to, w);
        }
        let w = self.peers.get_mut(&to).unwrap();
        msg.to_frame().write_to(w)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::id::ObjectId;
    use bytes::Bytes;

    #[test]
    fn loopback_put_get() {
        let mut cfg = ClusterConfig::default().with_node_count(2);
        cfg.block_size = 1 << 20;
        let mut c = TcpCluster::start(cfg).unwrap();
        let id = ObjectId::from_name("tcp");
        let data = Bytes::from((0..3_000_000u32).map(|i| (i % 251) as u8).collect::<Vec<_>>());
        let p = c.submit(NodeId(0), ClientRequest::Put { id, payload: data.clone() });
        assert!(c.wait(&[p], Duration::from_secs(10)));
        let g = c.submit(NodeId(1), ClientRequest::Get { id, read_only: true });
        assert!(c.wait(&[g], Duration::from_secs(10)));
        match c.reply(g).unwrap() {
            ClientReply::Object(o) => assert_eq!(o.as_slice(), &data[..]),
            other => panic!("{other:?}"),
        }
    }
}
