//! Delivery side of the broker: device registration and one ordered push
//! channel per connected subscriber.
//!
//! Delivery is at-most-once per `deliver` call and there is no
//! store-and-forward: frames for disconnected subscribers are dropped with a
//! reason. Per-subscriber FIFO order is guaranteed for frames sent from a
//! single action execution; cross-subscriber ordering is unspecified.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use tokio::sync::mpsc;

use crate::domain::{DeliveryFrame, SubscriberId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    /// Subscriber id was never registered as a device.
    Unknown,
    /// Registered but no live connection.
    Disconnected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeliverOutcome {
    Delivered,
    Dropped(DropReason),
}

impl DeliverOutcome {
    pub fn is_delivered(self) -> bool {
        matches!(self, DeliverOutcome::Delivered)
    }
}

/// What to do when a second connection arrives for an already-connected id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DisplacePolicy {
    /// New connection wins; the old stream terminates.
    #[default]
    Displace,
    /// New connection is refused.
    Refuse,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("subscriber '{0}' is already registered")]
    AlreadyRegistered(String),
    #[error("unknown subscriber '{0}'")]
    UnknownSubscriber(String),
    #[error("subscriber '{0}' already has a live connection")]
    AlreadyConnected(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionState {
    Connected,
    Disconnected,
}

/// Registration record for one device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceInfo {
    pub registered_at_ms: u64,
    pub state: ConnectionState,
}

struct Device {
    registered_at_ms: u64,
    sender: Option<mpsc::UnboundedSender<DeliveryFrame>>,
}

fn epoch_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

pub struct Gateway {
    devices: Mutex<HashMap<String, Device>>,
    displace: DisplacePolicy,
    delivered: AtomicU64,
    dropped: AtomicU64,
}

impl Gateway {
    pub fn new(displace: DisplacePolicy) -> Self {
        Self {
            devices: Mutex::new(HashMap::new()),
            displace,
            delivered: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
        }
    }

    /// Register a subscriber id as a device. At most one registration per id.
    pub fn register_device(&self, subscriber: &SubscriberId) -> Result<(), GatewayError> {
        let mut devices = self.devices.lock().unwrap();
        if devices.contains_key(subscriber.as_str()) {
            return Err(GatewayError::AlreadyRegistered(subscriber.to_string()));
        }
        devices.insert(
            subscriber.to_string(),
            Device { registered_at_ms: epoch_ms(), sender: None },
        );
        Ok(())
    }

    pub fn device_info(&self, subscriber: &SubscriberId) -> Option<DeviceInfo> {
        let devices = self.devices.lock().unwrap();
        devices.get(subscriber.as_str()).map(|d| DeviceInfo {
            registered_at_ms: d.registered_at_ms,
            state: match &d.sender {
                Some(tx) if !tx.is_closed() => ConnectionState::Connected,
                _ => ConnectionState::Disconnected,
            },
        })
    }

    pub fn is_registered(&self, subscriber: &SubscriberId) -> bool {
        self.devices.lock().unwrap().contains_key(subscriber.as_str())
    }

    pub fn registered_count(&self) -> usize {
        self.devices.lock().unwrap().len()
    }

    /// Open the subscriber's push channel. Never yields two live streams for
    /// one id: a concurrent second connection either displaces the first or
    /// is refused, per policy.
    pub fn connect(
        &self,
        subscriber: &SubscriberId,
    ) -> Result<mpsc::UnboundedReceiver<DeliveryFrame>, GatewayError> {
        let mut devices = self.devices.lock().unwrap();
        let Some(device) = devices.get_mut(subscriber.as_str()) else {
            return Err(GatewayError::UnknownSubscriber(subscriber.to_string()));
        };
        let live = device.sender.as_ref().is_some_and(|tx| !tx.is_closed());
        if live && self.displace == DisplacePolicy::Refuse {
            return Err(GatewayError::AlreadyConnected(subscriber.to_string()));
        }
        let (tx, rx) = mpsc::unbounded_channel();
        device.sender = Some(tx);
        Ok(rx)
    }

    pub fn disconnect(&self, subscriber: &SubscriberId) {
        if let Some(device) = self.devices.lock().unwrap().get_mut(subscriber.as_str()) {
            device.sender = None;
        }
    }

    /// Push one frame to its subscriber, preserving per-subscriber FIFO
    /// order from this call site.
    pub fn deliver(&self, frame: DeliveryFrame) -> DeliverOutcome {
        let mut devices = self.devices.lock().unwrap();
        let outcome = match devices.get_mut(frame.subscriber_id.as_str()) {
            None => DeliverOutcome::Dropped(DropReason::Unknown),
            Some(device) => match &device.sender {
                None => DeliverOutcome::Dropped(DropReason::Disconnected),
                Some(tx) => {
                    if tx.send(frame).is_ok() {
                        DeliverOutcome::Delivered
                    } else {
                        device.sender = None;
                        DeliverOutcome::Dropped(DropReason::Disconnected)
                    }
                }
            },
        };
        match outcome {
            DeliverOutcome::Delivered => self.delivered.fetch_add(1, Ordering::Relaxed),
            DeliverOutcome::Dropped(_) => self.dropped.fetch_add(1, Ordering::Relaxed),
        };
        outcome
    }

    pub fn delivered_count(&self) -> u64 {
        self.delivered.load(Ordering::Relaxed)
    }

    pub fn dropped_count(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }
}

/// One NDJSON wire line for a frame: the four fields in fixed order,
/// terminated by a single newline.
pub fn frame_line(frame: &DeliveryFrame) -> String {
    let mut line = serde_json::to_string(frame).expect("frames are always serializable");
    line.push('\n');
    line
}
