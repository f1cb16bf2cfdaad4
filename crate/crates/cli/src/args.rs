//! Flag parsing. Dedicated flags (--config, --seed, --out, --checkpoint,
//! --trials, --resume) are pulled out; any other `--key value` or
//! `--key=value` pair is kept as a config override in command-line order.

use gated_mip_core::{Error, Result};

#[derive(Debug, Default)]
pub struct Args {
    pub command: String,
    pub positional: Vec<String>,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<String>,
    pub checkpoint: Option<String>,
    pub trials: Option<usize>,
    pub resume: bool,
    pub help: bool,
    pub overrides: Vec<(String, String)>,
}

pub fn parse(argv: &[String]) -> Result<Args> {
    let mut args = Args::default();
    let mut it = argv.iter().peekable();
    while let Some(tok) = it.next() {
        if tok == "-h" || tok == "--help" {
            args.help = true;
            continue;
        }
        let Some(flag) = tok.strip_prefix("--") else {
            if args.command.is_empty() {
                args.command = tok.clone();
            } else {
                args.positional.push(tok.clone());
            }
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k, Some(v.to_string())),
            None => (flag, None),
        };
        if key == "resume" {
            if inline.is_some() {
                return Err(Error::config("--resume takes no value"));
            }
            args.resume = true;
            continue;
        }
        // `--key value` form: the next token is the value unless it is
        // another long flag. A single leading dash stays a value, so
        // negative numbers work.
        let value = match inline {
            Some(v) => v,
            None => match it.peek() {
                Some(v) if !v.starts_with("--") => it.next().unwrap().clone(),
                _ => return Err(Error::config(format!("missing value for --{key}"))),
            },
        };
        match key {
            "config" => args.config = Some(value),
            "out" => args.out = Some(value),
            "checkpoint" => args.checkpoint = Some(value),
            "seed" => {
                args.seed = Some(
                    value
                        .parse()
                        .map_err(|_| Error::config(format!("--seed: cannot parse '{value}'")))?,
                )
            }
            "trials" => {
                args.trials = Some(
                    value
                        .parse()
                        .map_err(|_| Error::config(format!("--trials: cannot parse '{value}'")))?,
                )
            }
            _ => args.overrides.push((key.to_string(), value)),
        }
    }
    if args.command.is_empty() && !args.help {
        return Err(Error::config("no command given; try --help"));
    }
    Ok(args)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn flags_and_overrides_separate() {
        let a = parse(&sv(&[
            "train",
            "--config",
            "base.txt",
            "--seed=7",
            "--method",
            "symile",
            "--p=1.0",
            "--modelname.logit_scale_init",
            "-0.5",
        ]))
        .unwrap();
        assert_eq!(a.command, "train");
        assert_eq!(a.config.as_deref(), Some("base.txt"));
        assert_eq!(a.seed, Some(7));
        assert_eq!(
            a.overrides,
            vec![
                ("method".into(), "symile".into()),
                ("p".into(), "1.0".into()),
                ("modelname.logit_scale_init".into(), "-0.5".into()),
            ]
        );
    }

    #[test]
    fn positionals_follow_the_command() {
        let a = parse(&sv(&["sweep", "ablation", "--resume", "--out", "runs/x"])).unwrap();
        assert_eq!(a.command, "sweep");
        assert_eq!(a.positional, vec!["ablation".to_string()]);
        assert!(a.resume);
        assert_eq!(a.out.as_deref(), Some("runs/x"));
    }

    #[test]
    fn missing_values_and_commands_are_config_errors() {
        assert!(parse(&sv(&["train", "--seed"])).is_err());
        assert!(parse(&sv(&["train", "--seed", "--out", "x"])).is_err());
        assert!(parse(&sv(&["train", "--seed", "abc"])).is_err());
        assert!(parse(&sv(&[])).is_err());
        assert!(parse(&sv(&["--help"])).unwrap().help);
    }
}
