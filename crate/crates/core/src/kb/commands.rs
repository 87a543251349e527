//! The curated OpenFOAM command list. It backs both the command
//! documentation index and the Allrun whitelist.

use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::KbError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandDoc {
    pub name: String,
    pub category: String,
    pub description: String,
    pub usage: String,
}

impl CommandDoc {
    /// One-line help as shown to the model.
    pub fn help_line(&self) -> String {
        format!("{}: {} Usage: {}", self.name, self.description, self.usage)
    }
}

/// Commands shipped with the crate.
pub fn builtin_commands() -> &'static [CommandDoc] {
    static COMMANDS: OnceLock<Vec<CommandDoc>> = OnceLock::new();
    COMMANDS.get_or_init(|| {
        serde_json::from_str(include_str!("../../assets/commands.json"))
            .expect("shipped command list is valid")
    })
}

/// Solvers the architect may choose from.
pub fn known_solvers() -> &'static [&'static str] {
    static SOLVERS: OnceLock<Vec<&'static str>> = OnceLock::new();
    SOLVERS.get_or_init(|| {
        include_str!("../../assets/solvers.txt")
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect()
    })
}

pub fn find_command(name: &str) -> Option<&'static CommandDoc> {
    builtin_commands().iter().find(|c| c.name == name)
}

/// Reads a command-help directory: every `<name>.txt` file becomes one
/// command whose description is the file content.
pub fn load_command_dir(dir: &Path) -> Result<Vec<CommandDoc>, KbError> {
    let mut paths: Vec<_> = fs::read_dir(dir)
        .map_err(|e| KbError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    paths.sort();
    let mut docs = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| KbError::io(&path, e))?;
        let name = path
            .file_stem()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        docs.push(CommandDoc {
            category: "custom".into(),
            usage: name.clone(),
            description: text.trim().to_string(),
            name,
        });
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_lists_load() {
        assert!(find_command("blockMesh").is_some());
        assert!(find_command("gmshToFoam").is_some());
        assert!(find_command("rm").is_none());
        assert!(known_solvers().contains(&"icoFoam"));
        assert!(known_solvers().contains(&"buoyantFoam"));
        for s in known_solvers() {
            assert_eq!(find_command(s).map(|c| c.category.as_str()), Some("solver"));
        }
    }
}
