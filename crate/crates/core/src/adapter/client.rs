use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use crate::adapter::protocol::{Request, Response};
use crate::dataio::{Mask, RgbImage};
use crate::error::{Error, Result};
use crate::prompting::PromptSet;

struct Running {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// One external adapter process, one request in flight at a time.
///
/// A process that times out is killed; the next call starts a fresh one.
pub struct AdapterClient {
    command: Vec<String>,
    timeout_ms: u64,
    running: Option<Running>,
    next_id: u64,
}

impl AdapterClient {
    pub fn spawn(command: &[String], timeout_ms: u64) -> Result<Self> {
        if timeout_ms == 0 {
            return Err(Error::Config("adapter timeout must be positive".into()));
        }
        let mut client = Self {
            command: command.to_vec(),
            timeout_ms,
            running: None,
            next_id: 0,
        };
        client.start()?;
        Ok(client)
    }

    fn start(&mut self) -> Result<()> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::AdapterSpawn("empty adapter command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::AdapterSpawn(format!("`{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        self.running = Some(Running { child, stdin, lines: rx });
        Ok(())
    }

    fn kill(&mut self) {
        if let Some(mut r) = self.running.take() {
            let _ = r.child.kill();
            let _ = r.child.wait();
        }
    }

    /// Sends one request and waits for its reply.
    pub fn call(&mut self, request: &Request) -> Result<Response> {
        if self.running.is_none() {
            self.start()?;
        }
        let line = request.encode()?;
        let running = self.running.as_mut().expect("started above");
        let sent = writeln!(running.stdin, "{line}").and_then(|_| running.stdin.flush());
        if let Err(e) = sent {
            self.kill();
            return Err(Error::AdapterReply(format!("adapter stopped reading requests: {e}")));
        }
        let reply = match running.lines.recv_timeout(Duration::from_millis(self.timeout_ms)) {
            Ok(Ok(reply)) => reply,
            Ok(Err(e)) => {
                self.kill();
                return Err(Error::AdapterReply(format!("reading reply: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                self.kill();
                return Err(Error::AdapterTimeout(self.timeout_ms));
            }
            Err(RecvTimeoutError::Disconnected) => {
                self.kill();
                return Err(Error::AdapterReply("adapter exited without replying".into()));
            }
        };
        let response = Response::decode(&reply).map_err(|e| Error::AdapterReply(format!("{e}: {reply}")))?;
        if response.id != request.id {
            self.kill();
            return Err(Error::AdapterReply(format!(
                "reply id `{}` does not match request id `{}`",
                response.id, request.id
            )));
        }
        if !response.ok {
            return Err(Error::AdapterFailure(response.error.unwrap_or_default()));
        }
        Ok(response)
    }

    pub fn segment(&mut self, image: &RgbImage, prompts: &PromptSet) -> Result<Mask> {
        self.next_id += 1;
        let request = Request::segment(format!("seg-{}", self.next_id), image, prompts);
        let response = self.call(&request)?;
        let mask = response
            .mask
            .ok_or_else(|| Error::AdapterReply("segment reply without a mask".into()))?;
        mask.to_mask(image.width(), image.height())
    }
}

impl Drop for AdapterClient {
    fn drop(&mut self) {
        self.kill();
    }
}
