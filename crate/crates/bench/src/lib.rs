//! Input generators shared by the benchmarks.

use std::fmt::Write as _;
use std::path::Path;

/// Energy-monitor CSV with `rows` one-minute records spread over a few processes.
pub fn energy_log_csv(rows: usize) -> String {
    let names = ["node.exe", "java.exe", "chrome.exe", "explorer.exe"];
    let mut out =
        String::from("ProcessName,AppId,TimeStamp,IntervalSeconds,TotalEnergyConsumption\n");
    for i in 0..rows {
        let (h, m) = ((i / 60) % 24, i % 60);
        let day = 1 + i / 1440 % 28;
        let _ = writeln!(
            out,
            "{},app {},2024-02-{day:02}T{h:02}:{m:02}:00Z,60,{}",
            names[i % names.len()],
            i % 7,
            1000 + (i * 7919) % 50_000
        );
    }
    out
}

/// Writes `files` text files of `words` words each under `dir`.
pub fn write_corpus(dir: &Path, files: usize, words: usize) -> std::io::Result<()> {
    let body = (0..words)
        .map(|i| format!("w{}", i % 97))
        .collect::<Vec<_>>()
        .join(" ");
    for i in 0..files {
        let sub = dir.join(format!("d{}", i % 8));
        std::fs::create_dir_all(&sub)?;
        std::fs::write(sub.join(format!("f{i:05}.txt")), &body)?;
    }
    Ok(())
}
