//! Byte-stream transports the protocol runs over: loopback/remote TCP and an
//! in-process duplex pipe for simulated runs. Both carry the identical wire
//! bytes.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

/// Blocking byte stream with an optional read timeout.
pub trait Transport: Read + Write + Send {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()>;
}

impl Transport for TcpStream {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        TcpStream::set_read_timeout(self, timeout)
    }
}

impl Transport for Box<dyn Transport> {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        (**self).set_read_timeout(timeout)
    }
}

#[derive(Default)]
struct PipeState {
    buf: VecDeque<u8>,
    write_closed: bool,
    read_closed: bool,
}

struct PipeShared {
    state: Mutex<PipeState>,
    readable: Condvar,
}

/// Reading half of a one-directional in-process pipe.
pub struct PipeReader {
    shared: Arc<PipeShared>,
    timeout: Option<Duration>,
}

/// Writing half of a one-directional in-process pipe. Dropping it signals EOF
/// to the reader.
pub struct PipeWriter {
    shared: Arc<PipeShared>,
}

fn pipe() -> (PipeWriter, PipeReader) {
    let shared = Arc::new(PipeShared {
        state: Mutex::new(PipeState::default()),
        readable: Condvar::new(),
    });
    (
        PipeWriter {
            shared: shared.clone(),
        },
        PipeReader {
            shared,
            timeout: None,
        },
    )
}

impl Read for PipeReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if buf.is_empty() {
            return Ok(0);
        }
        let mut state = self.shared.state.lock().unwrap();
        loop {
            if !state.buf.is_empty() {
                let n = buf.len().min(state.buf.len());
                for slot in buf[..n].iter_mut() {
                    *slot = state.buf.pop_front().unwrap();
                }
                return Ok(n);
            }
            if state.write_closed {
                return Ok(0);
            }
            state = match self.timeout {
                Some(timeout) => {
                    let (guard, result) = self
                        .shared
                        .readable
                        .wait_timeout(state, timeout)
                        .unwrap();
                    if result.timed_out() && guard.buf.is_empty() && !guard.write_closed {
                        return Err(io::Error::new(io::ErrorKind::TimedOut, "pipe read timeout"));
                    }
                    guard
                }
                None => self.shared.readable.wait(state).unwrap(),
            };
        }
    }
}

impl Drop for PipeReader {
    fn drop(&mut self) {
        self.shared.state.lock().unwrap().read_closed = true;
    }
}

impl Write for PipeWriter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let mut state = self.shared.state.lock().unwrap();
        if state.read_closed {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe reader gone"));
        }
        state.buf.extend(buf);
        self.shared.readable.notify_all();
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

impl Drop for PipeWriter {
    fn drop(&mut self) {
        self.shared.state.lock().unwrap().write_closed = true;
        self.shared.readable.notify_all();
    }
}

/// One endpoint of an in-process duplex connection.
pub struct PipeEnd {
    reader: PipeReader,
    writer: PipeWriter,
}

impl Read for PipeEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        self.reader.read(buf)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.writer.write(buf)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.writer.flush()
    }
}

impl Transport for PipeEnd {
    fn set_read_timeout(&mut self, timeout: Option<Duration>) -> io::Result<()> {
        self.reader.timeout = timeout;
        Ok(())
    }
}

/// Connected pair of in-process endpoints; what one writes the other reads.
pub fn duplex() -> (PipeEnd, PipeEnd) {
    let (w_ab, r_ab) = pipe();
    let (w_ba, r_ba) = pipe();
    (
        PipeEnd {
            reader: r_ba,
            writer: w_ab,
        },
        PipeEnd {
            reader: r_ab,
            writer: w_ba,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplex_carries_bytes_both_ways() {
        let (mut a, mut b) = duplex();
        a.write_all(b"ping").unwrap();
        let mut buf = [0u8; 4];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"ping");
        b.write_all(b"pong").unwrap();
        a.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"pong");
    }

    #[test]
    fn dropping_writer_signals_eof() {
        let (mut a, b) = duplex();
        drop(b);
        let mut buf = [0u8; 1];
        assert_eq!(a.read(&mut buf).unwrap(), 0);
    }

    #[test]
    fn read_timeout_fires_on_silence() {
        let (mut a, _b) = duplex();
        a.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        let mut buf = [0u8; 1];
        let err = a.read(&mut buf).unwrap_err();
        assert_eq!(err.kind(), io::ErrorKind::TimedOut);
    }

    #[test]
    fn cross_thread_round_trip() {
        let (mut a, mut b) = duplex();
        let t = std::thread::spawn(move || {
            let mut buf = [0u8; 5];
            b.read_exact(&mut buf).unwrap();
            b.write_all(&buf).unwrap();
        });
        a.write_all(b"hello").unwrap();
        let mut buf = [0u8; 5];
        a.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hello");
        t.join().unwrap();
    }
}
