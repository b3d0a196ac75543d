//! Built-in stand-in for an external adapter, used to exercise the protocol
//! without any model installed.

use std::io::{BufRead, Write};
use std::thread;
use std::time::Duration;

use crate::adapter::protocol::{peek_id, Op, Request, Response, WireTensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StubMode {
    /// Segment requests get an all-ones mask of the image size.
    Ones,
    /// Segment requests get a mask one row taller than the image.
    WrongDims,
    /// Sleeps before answering like `Ones`.
    Delay(u64),
}

impl StubMode {
    pub fn parse(name: &str, delay_ms: u64) -> Result<Self> {
        match name {
            "ones" => Ok(StubMode::Ones),
            "wrong-dims" => Ok(StubMode::WrongDims),
            "delay" => Ok(StubMode::Delay(delay_ms)),
            _ => Err(Error::Config(format!("unknown stub mode `{name}`"))),
        }
    }
}

pub fn answer(line: &str, mode: StubMode) -> Response {
    let request = match Request::decode(line) {
        Ok(r) => r,
        Err(e) => return Response::failure(peek_id(line), e.to_string()),
    };
    if request.op != Op::Segment {
        return Response::failure(request.id, format!("{:?} is not supported by the stub adapter", request.op));
    }
    let image = request.image.as_ref().expect("validated segment request");
    let (h, w) = (image.shape[0], image.shape[1]);
    let rows = match mode {
        StubMode::WrongDims => h + 1,
        StubMode::Ones => h,
        StubMode::Delay(ms) => {
            thread::sleep(Duration::from_millis(ms));
            h
        }
    };
    let mut response = Response::success(request.id);
    response.mask = Some(WireTensor::from_u8(vec![rows, w], &vec![255; rows * w]).expect("sized above"));
    response
}

/// Answers one line per request until the input closes.
pub fn serve(input: impl BufRead, mut output: impl Write, mode: StubMode) -> Result<()> {
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = answer(&line, mode);
        writeln!(output, "{}", serde_json::to_string(&response)?)?;
        output.flush()?;
    }
    Ok(())
}
