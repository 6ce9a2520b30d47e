//! `pilotfarm-sleep SECONDS`: the stand-in payload of generated executable
//! tasks. Sleeps and exits 0; exits 2 on a bad argument.

use std::process::ExitCode;
use std::time::Duration;

fn main() -> ExitCode {
    let arg = std::env::args().nth(1).unwrap_or_default();
    match arg.parse::<f64>() {
        Ok(s) if s.is_finite() && s >= 0.0 => {
            std::thread::sleep(Duration::from_secs_f64(s));
            ExitCode::SUCCESS
        }
        _ => {
            eprintln!("usage: pilotfarm-sleep SECONDS (got {arg:?})");
            ExitCode::from(2)
        }
    }
}
