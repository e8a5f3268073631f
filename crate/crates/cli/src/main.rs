use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ropsmith_core::compiler::staging_layout;
use ropsmith_core::emulator::replay;
use ropsmith_core::payload::{from_json, parse_payload_file};
use ropsmith_core::{
    compile_chain, find_gadgets, layout, load_elf, render, summarize, Arg, BadBytes, Catalog, Constraints,
    EmuConfig, Elf64Image, Format, ScanConfig, SyscallGoal,
};
use serde_json::json;

const EXIT_INPUT: u8 = 2;
const EXIT_COMPILE: u8 = 3;
const EXIT_VERIFY: u8 = 4;

#[derive(Parser)]
#[command(name = "ropsmith", version, about = "Find gadgets and build syscall ROP chains for x86-64 ELF binaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List gadgets, one per line, sorted by address.
    Gadgets {
        binary: PathBuf,
        #[command(flatten)]
        scan: ScanArgs,
        /// Emit a JSON array instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compile a syscall goal into a payload.
    Chain {
        binary: PathBuf,
        #[command(flatten)]
        goal: GoalArgs,
        /// Comma-separated hex bytes the payload must not contain, e.g. 00,0a.
        #[arg(long, value_parser = parse_bad_bytes)]
        bad_bytes: Option<BadBytes>,
        /// Output format.
        #[arg(long, default_value = "raw", value_parser = parse_format)]
        format: Format,
        /// Write the payload here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay a payload in the emulator and check it reaches the goal.
    Verify {
        binary: PathBuf,
        /// Raw, hex or JSON payload file.
        payload: PathBuf,
        #[command(flatten)]
        goal: GoalArgs,
        /// Print one JSON line per executed instruction.
        #[arg(long)]
        trace: bool,
    },
}

#[derive(Args)]
struct ScanArgs {
    /// Maximum instructions per gadget, terminator included.
    #[arg(long, default_value_t = 5, value_parser = parse_count)]
    max_instr: usize,
    /// Bytes scanned backward from each terminator.
    #[arg(long, default_value_t = 20, value_parser = parse_count)]
    max_lookback: usize,
}

#[derive(Args)]
struct GoalArgs {
    /// Syscall number.
    #[arg(long, value_parser = parse_u64)]
    syscall: u64,
    /// Argument in order: imm:<u64> or data:<string | 0xHEX>. Strings get a
    /// trailing NUL; hex bytes are used as given.
    #[arg(long = "arg", value_parser = parse_arg)]
    args: Vec<Arg>,
    /// Load base added to every address.
    #[arg(long, default_value = "0", value_parser = parse_u64)]
    base: u64,
    /// Absolute address for staged data arguments.
    #[arg(long, value_parser = parse_u64)]
    data_addr: Option<u64>,
}

impl GoalArgs {
    fn goal(&self) -> Result<SyscallGoal, String> {
        SyscallGoal::new(self.syscall, self.args.clone()).map_err(|e| e.to_string())
    }
}

fn parse_u64(s: &str) -> Result<u64, String> {
    let r = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse(),
    };
    r.map_err(|e| format!("invalid number {s:?}: {e}"))
}

fn parse_count(s: &str) -> Result<usize, String> {
    match parse_u64(s)? {
        0 => Err("must be at least 1".into()),
        n => usize::try_from(n).map_err(|e| e.to_string()),
    }
}

fn parse_hex_bytes(s: &str) -> Result<Vec<u8>, String> {
    if s.is_empty() || !s.len().is_multiple_of(2) {
        return Err(format!("hex byte string {s:?} must have an even, non-zero length"));
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).map_err(|e| format!("invalid hex {s:?}: {e}")))
        .collect()
}

fn parse_arg(s: &str) -> Result<Arg, String> {
    if let Some(v) = s.strip_prefix("imm:") {
        return parse_u64(v).map(Arg::Immediate);
    }
    if let Some(d) = s.strip_prefix("data:") {
        if let Some(hex) = d.strip_prefix("0x") {
            return parse_hex_bytes(hex).map(Arg::DataPointer);
        }
        if d.is_empty() {
            return Err("data argument is empty".into());
        }
        let mut bytes = d.as_bytes().to_vec();
        bytes.push(0);
        return Ok(Arg::DataPointer(bytes));
    }
    Err(format!("argument {s:?} must start with imm: or data:"))
}

fn parse_bad_bytes(s: &str) -> Result<BadBytes, String> {
    let bytes = s
        .split(',')
        .map(|b| {
            let b = b.trim();
            let b = b.strip_prefix("0x").unwrap_or(b);
            if b.is_empty() || b.len() > 2 {
                return Err(format!("invalid byte {b:?}"));
            }
            u8::from_str_radix(b, 16).map_err(|e| format!("invalid byte {b:?}: {e}"))
        })
        .collect::<Result<Vec<u8>, String>>()?;
    let bad = BadBytes::new(bytes);
    if bad.len() == 256 {
        return Err("every byte value is forbidden".into());
    }
    Ok(bad)
}

fn parse_format(s: &str) -> Result<Format, String> {
    s.parse::<Format>().map_err(|e| e.to_string())
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load(path: &Path) -> Result<Elf64Image, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    load_elf(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn write_stdout(bytes: &[u8]) -> ExitCode {
    let mut out = std::io::stdout().lock();
    match out.write_all(bytes).and_then(|_| out.flush()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(EXIT_INPUT, format!("cannot write output: {e}")),
    }
}

fn cmd_gadgets(binary: &Path, scan: &ScanArgs, as_json: bool) -> ExitCode {
    let image = match load(binary) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let gadgets = find_gadgets(&image, &ScanConfig::new(scan.max_instr, scan.max_lookback));
    let mut text = String::new();
    if as_json {
        let list: Vec<_> = gadgets
            .iter()
            .map(|g| {
                let effect = summarize(g);
                json!({
                    "vaddr": format!("{:#x}", g.vaddr),
                    "text": g.text(),
                    "tags": effect.tags.iter().map(|t| t.to_string()).collect::<Vec<_>>(),
                    "stack_delta": effect.stack_delta,
                })
            })
            .collect();
        text = serde_json::to_string_pretty(&list).expect("json");
        text.push('\n');
    } else {
        for g in &gadgets {
            text.push_str(&format!("{:#x}: {g}\n", g.vaddr));
        }
    }
    write_stdout(text.as_bytes())
}

fn cmd_chain(
    binary: &Path,
    goal_args: &GoalArgs,
    bad_bytes: Option<BadBytes>,
    format: Format,
    out: Option<&Path>,
) -> ExitCode {
    let goal = match goal_args.goal() {
        Ok(g) => g,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let image = match load(binary) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let catalog = Catalog::from_image(&image, &ScanConfig::default());
    let constraints = Constraints {
        bad_bytes: bad_bytes.unwrap_or_default(),
        data_vaddr: goal_args.data_addr,
        base_offset: goal_args.base,
        ..Constraints::default()
    };
    let chain = match compile_chain(&goal, &catalog, &constraints) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_COMPILE, e),
    };
    let payload = match layout(&chain, goal_args.base) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_COMPILE, e),
    };
    let bytes = render(&payload, format);
    match out {
        Some(path) => match fs::write(path, &bytes) {
            Ok(()) => {
                println!("wrote {} words ({} steps) to {}", payload.len(), chain.steps.len(), path.display());
                ExitCode::SUCCESS
            }
            Err(e) => fail(EXIT_INPUT, format!("cannot write {}: {e}", path.display())),
        },
        None => write_stdout(&bytes),
    }
}

fn read_payload(path: &Path) -> Result<Vec<u64>, String> {
    let bytes = fs::read(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    if bytes.first() == Some(&b'{') {
        if let Ok(text) = std::str::from_utf8(&bytes) {
            if let Ok(p) = from_json(text) {
                return Ok(p.words);
            }
        }
    }
    parse_payload_file(&bytes).map_err(|e| format!("{}: {e}", path.display()))
}

fn cmd_verify(binary: &Path, payload: &Path, goal_args: &GoalArgs, trace: bool) -> ExitCode {
    let goal = match goal_args.goal() {
        Ok(g) => g,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let image = match load(binary) {
        Ok(i) => i,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let words = match read_payload(payload) {
        Ok(w) => w,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let constraints =
        Constraints { data_vaddr: goal_args.data_addr, base_offset: goal_args.base, ..Constraints::default() };
    let staged = match staging_layout(&goal, &image.writable_regions(), &constraints) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let cfg = EmuConfig { base_offset: goal_args.base, trace, ..EmuConfig::default() };
    let (outcome, report) = match replay(&image, &words, &goal, &staged, &cfg) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_INPUT, e),
    };
    let mut text = String::new();
    if let Some(entries) = outcome.trace() {
        for t in entries {
            text.push_str(&serde_json::to_string(t).expect("json"));
            text.push('\n');
        }
    }
    text.push_str(&format!("outcome: {outcome}\n{report}\n"));
    let code = write_stdout(text.as_bytes());
    if code != ExitCode::SUCCESS {
        return code;
    }
    if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_VERIFY)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match &cli.command {
        Command::Gadgets { binary, scan, json } => cmd_gadgets(binary, scan, *json),
        Command::Chain { binary, goal, bad_bytes, format, out } => {
            cmd_chain(binary, goal, *bad_bytes, *format, out.as_deref())
        }
        Command::Verify { binary, payload, goal, trace } => cmd_verify(binary, payload, goal, *trace),
    }
}
