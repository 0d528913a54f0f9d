#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mwm {

enum class Errc {
    MagicMismatch,
    TruncatedFile,
    NonFinite,
    ConstantMap,
    NotPGM,
    UnsupportedMaxval,
    DegenerateClusters,
    ProviderFailure,
    ShapeMismatch,
    EmptyMask,
    NoMaskedPatches,
    EmptyPrediction,
    EmptyGroundTruth,
    EmptyList,
    MissingSlot,
    ConfigInvalid,
    IOFailure,
    InvalidArgument,
};

constexpr std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::MagicMismatch: return "MagicMismatch";
        case Errc::TruncatedFile: return "TruncatedFile";
        case Errc::NonFinite: return "NonFinite";
        case Errc::ConstantMap: return "ConstantMap";
        case Errc::NotPGM: return "NotPGM";
        case Errc::UnsupportedMaxval: return "UnsupportedMaxval";
        case Errc::DegenerateClusters: return "DegenerateClusters";
        case Errc::ProviderFailure: return "ProviderFailure";
        case Errc::ShapeMismatch: return "ShapeMismatch";
        case Errc::EmptyMask: return "EmptyMask";
        case Errc::NoMaskedPatches: return "NoMaskedPatches";
        case Errc::EmptyPrediction: return "EmptyPrediction";
        case Errc::EmptyGroundTruth: return "EmptyGroundTruth";
        case Errc::EmptyList: return "EmptyList";
        case Errc::MissingSlot: return "MissingSlot";
        case Errc::ConfigInvalid: return "ConfigInvalid";
        case Errc::IOFailure: return "IOFailure";
        case Errc::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

/// Every failure raised by the toolkit carries one of the codes above so
/// callers (and the CLI error log) can branch on it without parsing text.
class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace mwm
