//! Generation of one case file from its task, context and predecessors.

use std::collections::BTreeSet;

use super::AgentError;
use crate::case::{parse_dictionary, CaseFile, CaseMetadata, CaseState, FileKind, Plan, Task};
use crate::llm::schema::strip_code_fences;
use crate::llm::{render_prompt, vars, Gateway};

/// An already generated file offered to the model for consistency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Predecessor {
    pub path: String,
    pub content: String,
}

/// Generated files among the transitive predecessors of task `index`, in
/// plan order.
pub fn predecessors_for(plan: &Plan, index: usize, state: &CaseState) -> Vec<Predecessor> {
    let mut seen = BTreeSet::new();
    let mut stack = plan.graph.pre(index);
    while let Some(p) = stack.pop() {
        if seen.insert(p) {
            stack.extend(plan.graph.pre(p));
        }
    }
    seen.into_iter()
        .filter_map(|i| {
            let path = &plan.tasks[i].file;
            state.text(path).map(|content| Predecessor {
                path: path.clone(),
                content: content.to_string(),
            })
        })
        .collect()
}

fn render_predecessors(predecessors: &[Predecessor]) -> String {
    predecessors
        .iter()
        .map(|p| {
            format!(
                "<previous_file name=\"{}\">\n{}\n</previous_file>",
                p.path,
                p.content.trim_end()
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Writes one file. Never fails on content problems: a dictionary that does
/// not parse gets one repair round and is otherwise kept for the reviewer.
pub fn write_file(
    task: &Task,
    context: &str,
    predecessors: &[Predecessor],
    meta: &CaseMetadata,
    requirement: &str,
    gateway: &Gateway,
) -> Result<CaseFile, AgentError> {
    let folder = if task.folder().is_empty() {
        "."
    } else {
        task.folder()
    };
    let bundle = render_prompt(
        "file_generation",
        &vars([
            ("file_name", task.file_name().to_string()),
            ("folder_name", folder.to_string()),
            ("case_solver", meta.case_solver.clone()),
            ("user_requirement", requirement.trim().to_string()),
            ("similar_file_text", context.to_string()),
            ("predecessor_files", render_predecessors(predecessors)),
        ]),
    )?;
    let raw = gateway.chat_text(&bundle)?;
    let content = finalize_content(&task.file, &raw, gateway)?;
    Ok(CaseFile::from_text(task.file.clone(), content)?)
}

/// Strips code fences and, for dictionaries, checks the syntax with one
/// model repair round. The original text is kept when the repair fails too.
pub(crate) fn finalize_content(
    path: &str,
    raw: &str,
    gateway: &Gateway,
) -> Result<String, AgentError> {
    let content = normalize(strip_code_fences(raw));
    if FileKind::guess(path) != FileKind::Dictionary {
        return Ok(content);
    }
    let Err(err) = parse_dictionary(&content) else {
        return Ok(content);
    };
    log::warn!("{path} does not parse ({err}); requesting a repair");
    let bundle = render_prompt(
        "output_repair",
        &vars([
            ("path", path.to_string()),
            ("diagnostic", err.to_string()),
            ("content", content.clone()),
        ]),
    )?;
    let repaired = normalize(strip_code_fences(&gateway.chat_text(&bundle)?));
    match parse_dictionary(&repaired) {
        Ok(_) => Ok(repaired),
        Err(err) => {
            log::warn!("{path} still does not parse ({err}); keeping it for review");
            Ok(content)
        }
    }
}

/// Trims surrounding blank lines and ends the text with one newline.
pub(crate) fn normalize(text: &str) -> String {
    let trimmed = text.trim_matches(|c| c == '\n' || c == '\r').trim_end();
    format!("{trimmed}\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predecessor_sections() {
        let text = render_predecessors(&[Predecessor {
            path: "constant/transportProperties".into(),
            content: "nu 0.01;\n".into(),
        }]);
        assert_eq!(
            text,
            "<previous_file name=\"constant/transportProperties\">\nnu 0.01;\n</previous_file>"
        );
        assert_eq!(render_predecessors(&[]), "");
    }

    #[test]
    fn transitive_predecessors() {
        let dir = tempfile::tempdir().unwrap();
        let plan = Plan::from_tasks(
            [
                "system/controlDict",
                "system/blockMeshDict",
                "constant/transportProperties",
                "0/U",
            ]
            .into_iter()
            .map(Task::new)
            .collect(),
        );
        let mut state = CaseState::new("c", dir.path());
        for path in [
            "system/controlDict",
            "system/blockMeshDict",
            "constant/transportProperties",
        ] {
            state
                .put(CaseFile::from_text(path, "a 1;\n").unwrap())
                .unwrap();
        }
        let pre: Vec<_> = predecessors_for(&plan, 3, &state)
            .into_iter()
            .map(|p| p.path)
            .collect();
        assert_eq!(
            pre,
            [
                "system/controlDict",
                "system/blockMeshDict",
                "constant/transportProperties"
            ]
        );
        assert!(predecessors_for(&plan, 0, &state).is_empty());
    }
}
