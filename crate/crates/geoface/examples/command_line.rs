// Drives the command-line interface in-process.

pub fn run() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let out = dir.path().join("render");
    let code = geoface::cli::run(["geoface", "render-test", "--out", out.to_str().unwrap()]);
    anyhow::ensure!(code == 0, "render-test exited with {code}");
    print!("{}", std::fs::read_to_string(out.join("config_echo.toml"))?);

    let bad = geoface::cli::run(["geoface", "train", "--synthetic", "--lambda-rgb", "0.4", "--out", out.to_str().unwrap()]);
    println!("train with weights summing to 0.9 exits with {bad}");
    anyhow::ensure!(bad == 1);
    Ok(())
}

#[allow(dead_code)]
fn main() -> anyhow::Result<()> {
    run()
}
