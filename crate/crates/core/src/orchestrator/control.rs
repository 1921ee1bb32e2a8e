//! Operator control of a running twin. Commands take effect at the next
//! window boundary.

use std::sync::{Condvar, Mutex};

use crate::model::AccelerationMode;

#[derive(Debug, Default)]
struct ControlState {
    paused: bool,
    stopped: bool,
    pending_acceleration: Option<AccelerationMode>,
}

#[derive(Debug, Default)]
pub struct ControlHandle {
    state: Mutex<ControlState>,
    wake: Condvar,
}

impl ControlHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pause(&self) {
        self.state.lock().expect("control lock").paused = true;
    }

    pub fn resume(&self) {
        self.state.lock().expect("control lock").paused = false;
        self.wake.notify_all();
    }

    /// Asks the loop to finish after the current window.
    pub fn stop(&self) {
        self.state.lock().expect("control lock").stopped = true;
        self.wake.notify_all();
    }

    pub fn is_paused(&self) -> bool {
        self.state.lock().expect("control lock").paused
    }

    pub fn set_acceleration(&self, mode: AccelerationMode) {
        self.state.lock().expect("control lock").pending_acceleration = Some(mode);
    }

    pub(crate) fn take_acceleration(&self) -> Option<AccelerationMode> {
        self.state
            .lock()
            .expect("control lock")
            .pending_acceleration
            .take()
    }

    /// Blocks while paused. Returns `false` if the run was stopped.
    pub(crate) fn wait_at_boundary(&self) -> bool {
        let guard = self.state.lock().expect("control lock");
        let guard = self
            .wake
            .wait_while(guard, |s| s.paused && !s.stopped)
            .expect("control lock");
        !guard.stopped
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;
    use std::time::Duration;

    #[test]
    fn pause_blocks_until_resume() {
        let control = Arc::new(ControlHandle::new());
        control.pause();
        let c = control.clone();
        let waiter = std::thread::spawn(move || c.wait_at_boundary());
        std::thread::sleep(Duration::from_millis(20));
        assert!(!waiter.is_finished());
        control.resume();
        assert!(waiter.join().unwrap());
    }

    #[test]
    fn stop_releases_paused_loop() {
        let control = ControlHandle::new();
        control.pause();
        control.stop();
        assert!(!control.wait_at_boundary());
    }

    #[test]
    fn acceleration_is_taken_once() {
        let control = ControlHandle::new();
        control.set_acceleration(AccelerationMode::Fixed(60.0));
        assert_eq!(control.take_acceleration(), Some(AccelerationMode::Fixed(60.0)));
        assert_eq!(control.take_acceleration(), None);
    }
}
