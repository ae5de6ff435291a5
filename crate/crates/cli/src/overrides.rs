//! Pulls `--key value` config overrides out of the argument list before
//! clap sees it.

use std::collections::BTreeSet;

use tyrist_core::model::ModelConfig;
use tyrist_core::synth::DatasetConfig;
use tyrist_core::train::TrainConfig;

/// Config keys a subcommand accepts as flags. `seed` is a regular flag.
fn keys_for(subcommand: &str) -> BTreeSet<&'static str> {
    let mut keys: BTreeSet<&'static str> = match subcommand {
        "synth" => DatasetConfig::KEYS.into_iter().collect(),
        "train" => ModelConfig::KEYS.into_iter().chain(TrainConfig::KEYS).collect(),
        "flops" => ModelConfig::KEYS.into_iter().collect(),
        _ => BTreeSet::new(),
    };
    keys.remove("seed");
    keys
}

/// Splits `args` into what clap should parse and `(key, value)` overrides.
/// Dashes in flag names map to underscores.
pub fn split(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let Some(sub) = args.get(1) else {
        return (args.to_vec(), Vec::new());
    };
    let keys = keys_for(sub);
    let mut rest = args[..2.min(args.len())].to_vec();
    let mut overrides = Vec::new();
    let mut i = 2;
    while i < args.len() {
        let arg = &args[i];
        let flag = arg
            .strip_prefix("--")
            .map(|f| f.split_once('=').map_or((f, None), |(k, v)| (k, Some(v))));
        if let Some((name, inline)) = flag {
            let key = name.replace('-', "_");
            if let Some(&known) = keys.get(key.as_str()) {
                match inline {
                    Some(v) => {
                        overrides.push((known.to_string(), v.to_string()));
                        i += 1;
                    }
                    None if i + 1 < args.len() => {
                        overrides.push((known.to_string(), args[i + 1].clone()));
                        i += 2;
                    }
                    // a trailing flag without value: let clap report it
                    None => {
                        rest.push(arg.clone());
                        i += 1;
                    }
                }
                continue;
            }
        }
        rest.push(arg.clone());
        i += 1;
    }
    (rest, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn extracts_known_keys_only() {
        let (rest, ov) = split(&s(&[
            "tyrist",
            "train",
            "--epochs",
            "3",
            "--data",
            "d",
            "--stem-stride=2",
            "--out",
            "o",
        ]));
        assert_eq!(rest, s(&["tyrist", "train", "--data", "d", "--out", "o"]));
        assert_eq!(
            ov,
            vec![("epochs".into(), "3".into()), ("stem_stride".into(), "2".into())]
        );
    }

    #[test]
    fn seed_stays_a_flag_and_other_commands_get_nothing() {
        let (rest, ov) = split(&s(&["tyrist", "synth", "--seed", "4", "--image_size", "256"]));
        assert_eq!(rest, s(&["tyrist", "synth", "--seed", "4"]));
        assert_eq!(ov.len(), 1);
        let (rest, ov) = split(&s(&["tyrist", "eval", "--epochs", "3"]));
        assert_eq!(rest.len(), 4);
        assert!(ov.is_empty());
    }
}
