use std::collections::BTreeMap;
use std::path::PathBuf;

use airlift::runtime::EnvPolicy;
use airlift_cli::config::{GlobalConfig, Layer};
use proptest::prelude::*;

fn layer() -> impl Strategy<Value = Layer> {
    (
        proptest::option::of(proptest::collection::vec("/[a-z]{1,6}", 0..3)),
        proptest::option::of(proptest::sample::select(EnvPolicy::ALL.to_vec())),
        proptest::option::of(0u8..5),
    )
        .prop_map(|(dirs, policy, verbosity)| Layer {
            site_bind_dirs: dirs.map(|d| d.into_iter().map(PathBuf::from).collect()),
            default_env_policy: policy,
            verbosity,
        })
}

proptest! {
    #[test]
    fn first_layer_that_sets_a_key_wins(flags in layer(), env in layer(), file in layer()) {
        let c = GlobalConfig::resolve(&flags, &env, &file, None);
        let d = GlobalConfig::default();
        let expect_dirs = flags.site_bind_dirs.clone()
            .or(env.site_bind_dirs.clone())
            .or(file.site_bind_dirs.clone())
            .unwrap_or(d.site_bind_dirs);
        prop_assert_eq!(c.site_bind_dirs, expect_dirs);
        prop_assert_eq!(
            c.default_env_policy,
            flags.default_env_policy.or(env.default_env_policy).or(file.default_env_policy).unwrap_or(d.default_env_policy)
        );
        prop_assert_eq!(c.verbosity, flags.verbosity.or(env.verbosity).or(file.verbosity).unwrap_or(0));
    }

    #[test]
    fn file_and_environment_spellings_agree(l in layer()) {
        let mut text = String::new();
        let mut vars = BTreeMap::new();
        if let Some(d) = &l.site_bind_dirs {
            let joined = d.iter().map(|p| p.to_str().unwrap()).collect::<Vec<_>>().join(":");
            text += &format!("site_bind_dirs = {joined}\n");
            vars.insert("AIRLIFT_SITE_BIND_DIRS".to_string(), joined);
        }
        if let Some(p) = l.default_env_policy {
            text += &format!("default_env_policy = {p}\n");
            vars.insert("AIRLIFT_DEFAULT_ENV_POLICY".to_string(), p.to_string());
        }
        if let Some(v) = l.verbosity {
            text += &format!("# noise\nverbosity={v}\n");
            vars.insert("AIRLIFT_VERBOSITY".to_string(), v.to_string());
        }
        prop_assert_eq!(&Layer::parse_file(&text, "t").unwrap(), &l);
        prop_assert_eq!(&Layer::from_env(&vars).unwrap(), &l);
    }
}

#[test]
fn load_reads_file_named_by_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("airlift.conf");
    std::fs::write(&path, "verbosity = 2\ndefault_env_policy = merged\n").unwrap();
    let vars = BTreeMap::from([
        ("AIRLIFT_CONFIG".to_string(), path.display().to_string()),
        ("AIRLIFT_VERBOSITY".to_string(), "1".to_string()),
    ]);
    let c = GlobalConfig::load(&Layer::default(), None, &vars).unwrap();
    assert_eq!((c.verbosity, c.default_env_policy), (1, EnvPolicy::Merged));
    assert_eq!(c.config_file_path, Some(path));
    let flags = Layer {
        verbosity: Some(4),
        ..Layer::default()
    };
    assert_eq!(GlobalConfig::load(&flags, None, &vars).unwrap().verbosity, 4);
    assert!(GlobalConfig::load(&flags, Some(&dir.path().join("missing")), &vars).is_err());
}
