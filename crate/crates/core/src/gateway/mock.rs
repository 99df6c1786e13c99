//! Deterministic offline gateways for tests and `--backend mock` runs.

use std::collections::VecDeque;
use std::sync::Mutex;

use super::{ChatGateway, ChatReply, ChatRequest, GatewayError, GatewayErrorKind};

/// Replays a fixed sequence of replies, one per call. Running past the end
/// of the script is an error.
pub struct ScriptedGateway {
    script: Mutex<VecDeque<Result<String, GatewayErrorKind>>>,
    requests: Mutex<Vec<ChatRequest>>,
}

impl ScriptedGateway {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::from_results(replies.into_iter().map(|s| Ok(s.into())).collect())
    }

    pub fn from_results(script: Vec<Result<String, GatewayErrorKind>>) -> Self {
        Self { script: Mutex::new(script.into()), requests: Mutex::new(Vec::new()) }
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<ChatRequest> {
        self.requests.lock().expect("mock lock").clone()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().expect("mock lock").len()
    }
}

impl ChatGateway for ScriptedGateway {
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        request.validate()?;
        self.requests.lock().expect("mock lock").push(request.clone());
        match self.script.lock().expect("mock lock").pop_front() {
            Some(Ok(text)) => Ok(ChatReply::text(text)),
            Some(Err(kind)) => Err(GatewayError::new(kind, "scripted failure")),
            None => Err(GatewayError::new(GatewayErrorKind::Rejected, "mock script exhausted")),
        }
    }
}

/// Answers each request with a closure.
pub struct FnGateway<F> {
    respond: F,
}

impl<F> FnGateway<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(respond: F) -> Self {
        Self { respond }
    }
}

impl<F> ChatGateway for FnGateway<F>
where
    F: Fn(&ChatRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<ChatReply, GatewayError> {
        request.validate()?;
        (self.respond)(request).map(ChatReply::text)
    }
}
