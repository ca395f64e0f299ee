//! Websocket transport: `GET /ws` upgrades to a session connection.
//!
//! The first client to connect while no operator is present becomes the
//! owner; everyone else is a read-only spectator. A fixed-rate tick loop owns
//! the [`Session`], drains the command queue in arrival order, steps the
//! simulator and broadcasts one state frame per tick.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use faultarm::{SceneConfig, Sim};
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc};
use tokio::time::MissedTickBehavior;

use crate::protocol::{Command, Geometry, Role, ServerMessage, StateFrame};
use crate::session::Session;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scene: SceneConfig,
    pub tick_hz: f64,
    /// Saved recordings land here.
    pub out_dir: PathBuf,
    pub seed: u64,
}

enum Event {
    Command(u64, Command),
    Disconnect(u64),
}

struct Hub {
    geometry: Geometry,
    commands: mpsc::UnboundedSender<Event>,
    frames: broadcast::Sender<Arc<(u64, StateFrame)>>,
    clients: Mutex<Clients>,
    last_tick: AtomicU64,
}

#[derive(Default)]
struct Clients {
    next_id: u64,
    owner: Option<u64>,
    direct: HashMap<u64, mpsc::UnboundedSender<String>>,
}

impl Hub {
    fn reply(&self, client: u64, tick: u64, msg: ServerMessage) {
        let clients = self.clients.lock().expect("client table");
        if let Some(tx) = clients.direct.get(&client) {
            let _ = tx.send(msg.to_json(tick));
        }
    }
}

/// Serves until the listener fails. Errors only if the scene is invalid or
/// the output directory cannot be created.
pub async fn serve(listener: TcpListener, config: ServerConfig) -> std::io::Result<()> {
    let invalid = |e: faultarm::Error| std::io::Error::new(std::io::ErrorKind::InvalidInput, e.to_string());
    if !(config.tick_hz.is_finite() && config.tick_hz > 0.0) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidInput,
            "tick rate must be positive",
        ));
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let sim = Sim::new(config.scene.clone()).map_err(invalid)?;
    let session = Session::new(sim, config.out_dir.clone(), config.seed).map_err(invalid)?;
    let (cmd_tx, cmd_rx) = mpsc::unbounded_channel();
    let (frames, _) = broadcast::channel(64);
    let hub = Arc::new(Hub {
        geometry: session.geometry(),
        commands: cmd_tx,
        frames,
        clients: Mutex::new(Clients::default()),
        last_tick: AtomicU64::new(0),
    });
    tokio::spawn(tick_loop(session, Arc::clone(&hub), cmd_rx, config.tick_hz));
    let app = Router::new().route("/ws", get(upgrade)).with_state(hub);
    axum::serve(listener, app).await
}

async fn tick_loop(
    mut session: Session,
    hub: Arc<Hub>,
    mut commands: mpsc::UnboundedReceiver<Event>,
    hz: f64,
) {
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / hz));
    interval.set_missed_tick_behavior(MissedTickBehavior::Delay);
    let mut tick: u64 = 0;
    loop {
        interval.tick().await;
        while let Ok(event) = commands.try_recv() {
            match event {
                Event::Command(client, cmd) => match session.apply(cmd) {
                    Ok(Some(reply)) => hub.reply(client, tick, reply),
                    Ok(None) => {}
                    Err(message) => hub.reply(client, tick, ServerMessage::Error { message }),
                },
                Event::Disconnect(client) => {
                    if session.discard_recording() {
                        log::info!("operator {client} left; unsaved recording discarded");
                    }
                }
            }
        }
        match session.tick() {
            Ok(frame) => {
                let _ = hub.frames.send(Arc::new((tick, frame)));
            }
            Err(e) => log::error!("simulation step failed: {e}"),
        }
        hub.last_tick.store(tick, Ordering::Relaxed);
        tick += 1;
    }
}

async fn upgrade(ws: WebSocketUpgrade, State(hub): State<Arc<Hub>>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, hub))
}

async fn connection(socket: WebSocket, hub: Arc<Hub>) {
    let (direct_tx, mut direct_rx) = mpsc::unbounded_channel::<String>();
    let mut frames = hub.frames.subscribe();
    let (id, role) = {
        let mut c = hub.clients.lock().expect("client table");
        let id = c.next_id;
        c.next_id += 1;
        let role = if c.owner.is_none() {
            c.owner = Some(id);
            Role::Owner
        } else {
            Role::Spectator
        };
        c.direct.insert(id, direct_tx.clone());
        (id, role)
    };
    log::info!("client {id} connected as {role:?}");
    let (mut sink, mut stream) = socket.split();
    let mut sent_geometry = false;
    let now = || hub.last_tick.load(Ordering::Relaxed);
    let hello = ServerMessage::Session { role }.to_json(now());
    let greeted = sink.send(Message::Text(hello.into())).await.is_ok();

    if greeted {
        loop {
            tokio::select! {
                incoming = stream.next() => match incoming {
                    Some(Ok(Message::Text(text))) => {
                        let reply = match Command::parse(text.as_str()) {
                            Err(message) => Some(message),
                            Ok(_) if role == Role::Spectator => {
                                Some("spectators cannot send commands".to_string())
                            }
                            Ok(cmd) => {
                                let _ = hub.commands.send(Event::Command(id, cmd));
                                None
                            }
                        };
                        if let Some(message) = reply {
                            let _ = direct_tx.send(ServerMessage::Error { message }.to_json(now()));
                        }
                    }
                    Some(Ok(Message::Binary(_))) => {
                        let message = "binary frames are not supported".to_string();
                        let _ = direct_tx.send(ServerMessage::Error { message }.to_json(now()));
                    }
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => {}
                },
                frame = frames.recv() => match frame {
                    Ok(f) => {
                        let (tick, frame) = &*f;
                        let mut frame = frame.clone();
                        if !sent_geometry {
                            frame.geometry = Some(hub.geometry.clone());
                            sent_geometry = true;
                        }
                        let json = ServerMessage::State(frame).to_json(*tick);
                        if sink.send(Message::Text(json.into())).await.is_err() {
                            break;
                        }
                    }
                    Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("client {id} skipped {n} frames"),
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                Some(text) = direct_rx.recv() => {
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
            }
        }
    }

    {
        let mut c = hub.clients.lock().expect("client table");
        c.direct.remove(&id);
        if c.owner == Some(id) {
            c.owner = None;
            let _ = hub.commands.send(Event::Disconnect(id));
        }
    }
    log::info!("client {id} disconnected");
}
