use std::net::SocketAddr;
use std::path::PathBuf;

use cdemapper_core::kv;
use cdemapper_core::{LlmConfig, Preset};

/// Settings for `cdemapper serve`, read from a flat `key = value` file.
///
/// ```text
/// listen = 127.0.0.1:8080
/// index = data/index
/// store = data/projects
/// static_dir = ui/dist
/// cors = http://localhost:5173
/// preset = bm25
/// llm.model_name = gpt-4o
/// ```
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub listen: SocketAddr,
    pub index: PathBuf,
    pub store: PathBuf,
    pub static_dir: Option<PathBuf>,
    pub cors_allowlist: Vec<String>,
    /// Pipeline used for manual search and for projects created without a config.
    pub default_preset: Preset,
    pub llm: LlmConfig,
}

impl ServiceConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut listen: SocketAddr = "127.0.0.1:8080".parse().expect("valid default");
        let mut index = None;
        let mut store = PathBuf::from("cdemapper-data");
        let mut static_dir = None;
        let mut cors_allowlist = Vec::new();
        let mut default_preset = Preset::Bm25;
        let mut llm = LlmConfig::default();
        for (key, value) in kv::parse(text)? {
            match key.as_str() {
                "listen" => listen = value.parse().map_err(|e| format!("listen `{value}`: {e}"))?,
                "index" => index = Some(PathBuf::from(value)),
                "store" => store = PathBuf::from(value),
                "static_dir" => static_dir = Some(PathBuf::from(value)).filter(|p| !p.as_os_str().is_empty()),
                "cors" => {
                    cors_allowlist = value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(String::from)
                        .collect()
                }
                "preset" => default_preset = value.parse().map_err(|e| format!("{e}"))?,
                k if k.starts_with("llm.") => llm.set(k, &value).map_err(|e| e.to_string())?,
                other => return Err(format!("unknown service config key `{other}`")),
            }
        }
        let index = index.ok_or("service config needs `index = <dir>`")?;
        Ok(Self {
            listen,
            index,
            store,
            static_dir,
            cors_allowlist,
            default_preset,
            llm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_keys() {
        let c = ServiceConfig::parse(
            "# comment\nlisten = 0.0.0.0:9000\nindex = idx\nstore = st\ncors = http://a, http://b\npreset = bm25+emb\nllm.model_name = gpt-4o-mini\n",
        )
        .unwrap();
        assert_eq!(c.listen.port(), 9000);
        assert_eq!(c.index, PathBuf::from("idx"));
        assert_eq!(c.cors_allowlist, ["http://a", "http://b"]);
        assert_eq!(c.default_preset, Preset::Bm25Emb);
        assert_eq!(c.llm.model_name, "gpt-4o-mini");
    }

    #[test]
    fn index_is_required_and_keys_are_checked() {
        assert!(ServiceConfig::parse("listen = 127.0.0.1:1\n").is_err());
        assert!(ServiceConfig::parse("index = x\nbogus = 1\n").is_err());
    }
}
