#pragma once

#include <string>
#include <string_view>

#include "mwm/error.hpp"

namespace mwm {

enum class PromptStyle { Phrase, Sentence };

struct PromptTemplate {
    std::string text = "Describe the typical visual characteristics of a [category] in a [modality] image";
    PromptStyle style = PromptStyle::Sentence;
};

namespace detail {

inline bool replace_slot(std::string& text, std::string_view slot, std::string_view value) {
    bool found = false;
    for (std::size_t pos = text.find(slot); pos != std::string::npos; pos = text.find(slot, pos + value.size())) {
        text.replace(pos, slot.size(), value);
        found = true;
    }
    return found;
}

}  // namespace detail

/// Phrase prompts are the bare category; sentence prompts fill both slots.
inline std::string render_prompt(const PromptTemplate& tmpl, std::string_view category, std::string_view modality) {
    if (tmpl.style == PromptStyle::Phrase) return std::string(category);
    std::string out = tmpl.text;
    if (out.find("[category]") == std::string::npos) throw Error(Errc::MissingSlot, "template lacks [category]");
    if (out.find("[modality]") == std::string::npos) throw Error(Errc::MissingSlot, "template lacks [modality]");
    detail::replace_slot(out, "[category]", category);
    detail::replace_slot(out, "[modality]", modality);
    return out;
}

}  // namespace mwm
