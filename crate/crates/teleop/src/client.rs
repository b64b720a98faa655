//! Blocking scripted client, for tests and headless operation.

use std::collections::VecDeque;
use std::io;
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use taskadapt_core::adaptation::human_view;
use taskadapt_core::geometry::Pose;
use taskadapt_core::operators::demonstrate;
use taskadapt_core::scenario::Scenario;
use thiserror::Error;
use tokio_tungstenite::tungstenite::stream::MaybeTlsStream;
use tokio_tungstenite::tungstenite::{self, Message as WsMessage, WebSocket};

use crate::protocol::{decode, encode, Hello, InputFrame, Message, ProtocolError, Role, StateFrame};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Ws(Box<tungstenite::Error>),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("connection closed before the hello was answered")]
    NoAck,
    #[error("cannot evaluate frame: {0}")]
    View(String),
}

impl From<tungstenite::Error> for ClientError {
    fn from(e: tungstenite::Error) -> Self {
        ClientError::Ws(Box::new(e))
    }
}

pub struct ScriptedClient {
    socket: WebSocket<MaybeTlsStream<TcpStream>>,
    backlog: VecDeque<Message>,
    role: Role,
}

impl ScriptedClient {
    /// Connects, greets and waits for the granted role.
    pub fn connect(addr: SocketAddr, role: Role, name: Option<&str>) -> Result<Self, ClientError> {
        let (socket, _) = tungstenite::connect(format!("ws://{addr}"))?;
        if let MaybeTlsStream::Plain(tcp) = socket.get_ref() {
            tcp.set_read_timeout(Some(Duration::from_secs(30))).map_err(tungstenite::Error::Io)?;
            tcp.set_nodelay(true).map_err(tungstenite::Error::Io)?;
        }
        let mut client = Self { socket, backlog: VecDeque::new(), role };
        client.send(&Message::Hello(Hello { role, name: name.map(String::from) }))?;
        loop {
            match client.read()? {
                Some(Message::Hello(ack)) => {
                    client.role = ack.role;
                    return Ok(client);
                }
                Some(other) => client.backlog.push_back(other),
                None => return Err(ClientError::NoAck),
            }
        }
    }

    pub fn role(&self) -> Role {
        self.role
    }

    fn read(&mut self) -> Result<Option<Message>, ClientError> {
        loop {
            match self.socket.read() {
                Ok(WsMessage::Text(text)) => return Ok(Some(decode(&text)?)),
                Ok(WsMessage::Close(_)) => {
                    let _ = self.socket.flush();
                    return Ok(None);
                }
                Ok(_) => {}
                Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(None),
                Err(tungstenite::Error::Io(e)) if e.kind() == io::ErrorKind::ConnectionReset => return Ok(None),
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Next message from the service; `None` once the connection is closed.
    pub fn next_message(&mut self) -> Result<Option<Message>, ClientError> {
        match self.backlog.pop_front() {
            Some(m) => Ok(Some(m)),
            None => self.read(),
        }
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), ClientError> {
        self.send_raw(&encode(msg))
    }

    /// Sends text as-is, well-formed or not.
    pub fn send_raw(&mut self, text: &str) -> Result<(), ClientError> {
        self.socket.send(WsMessage::Text(text.to_string()))?;
        Ok(())
    }

    pub fn send_input(&mut self, u_h: [f64; 3], client_time: f64, sequence: u64) -> Result<(), ClientError> {
        self.send(&Message::Input(InputFrame { u_h, client_time, sequence }))
    }

    /// Answers every state frame with `respond(frame)` (sequence = frame tick)
    /// until the service closes the session. `None` skips the answer.
    /// Returns the number of frames seen.
    pub fn run<F>(&mut self, mut respond: F) -> Result<u64, ClientError>
    where
        F: FnMut(&StateFrame) -> Result<Option<[f64; 3]>, ClientError>,
    {
        let mut seen = 0;
        while let Some(msg) = self.next_message()? {
            if let Message::State(frame) = msg {
                seen += 1;
                if let Some(u) = respond(&frame)? {
                    self.send_input(u, frame.t, frame.tick)?;
                }
            }
        }
        Ok(seen)
    }

    pub fn close(mut self) {
        let _ = self.socket.close(None);
        while self.socket.read().is_ok() {}
    }
}

/// Recomputes the perfect demonstration from a state frame.
pub struct PerfectResponder {
    scenario: Arc<Scenario>,
    gain: DMatrix<f64>,
}

impl PerfectResponder {
    pub fn new(scenario: Arc<Scenario>) -> Self {
        let gain = scenario.config.adaptation.gain_matrix();
        Self { scenario, gain }
    }

    pub fn respond(&self, frame: &StateFrame) -> Result<[f64; 3], ClientError> {
        let sc = &self.scenario;
        let pose = Pose::from_array(&frame.pose);
        let twist = DVector::from_row_slice(&frame.twist);
        let view = human_view(sc.human_chart.as_ref(), &sc.mission, &pose, &twist)
            .map_err(|e| ClientError::View(e.to_string()))?;
        let task = frame.active_target.and_then(|k| sc.tasks.get(k));
        let u = demonstrate(&view, task, &self.gain);
        Ok([u[0], u[1], u[2]])
    }
}
